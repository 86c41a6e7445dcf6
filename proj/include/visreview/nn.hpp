#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "visreview/autodiff.hpp"

namespace vr {

enum class Activation { none, mish, softmax };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// Glorot-uniform sample: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
Tensor glorot_uniform(Tensor::Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// activation(W x + b)
struct DenseLayer {
  Parameter weight;  // out x in
  Parameter bias;    // out
  Activation activation = Activation::none;

  std::size_t in_dim() const { return weight.value.dim(1); }
  std::size_t out_dim() const { return weight.value.dim(0); }
  std::vector<Parameter*> parameters() { return {&weight, &bias}; }
};

DenseLayer make_dense(const std::string& name, std::size_t in, std::size_t out, Activation activation, Rng& rng);
Var dense_forward(Tape& tape, const DenseLayer& layer, Var x);

/// GRU with h' = (1 - z) * h + z * h_tilde, where
///   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br),
///   h_tilde = tanh(Wh x + Uh (r * h) + bh).
struct GruCell {
  Parameter wz, uz, bz;
  Parameter wr, ur, br;
  Parameter wh, uh, bh;

  std::size_t input_dim() const { return wz.value.dim(1); }
  std::size_t hidden_dim() const { return wz.value.dim(0); }
  std::vector<Parameter*> parameters() { return {&wz, &uz, &bz, &wr, &ur, &br, &wh, &uh, &bh}; }
};

GruCell make_gru(const std::string& name, std::size_t input_dim, std::size_t hidden_dim, Rng& rng);
Var gru_step(Tape& tape, const GruCell& cell, Var x, Var h_prev);

struct ConvStage {
  std::size_t filters = 8;
  std::size_t kernel = 3;
  std::size_t stride = 1;
};

/// Small CNN feature extractor: each stage is conv (valid padding) + bias +
/// mish; a global average pool over the last stage yields output_dim values,
/// so the last stage must have exactly output_dim filters.
struct BackboneConfig {
  std::size_t in_channels = 1;
  std::vector<ConvStage> stages;
  std::size_t output_dim = 0;
  std::uint64_t seed = 0;

  void validate() const;
  /// Spatial side length after all stages for a square input of side `size`.
  std::size_t output_side(std::size_t size) const;

  /// 8 / 16 / output_dim filters, 3x3 kernels, strides 2 / 2 / 1.
  static BackboneConfig small(std::size_t in_channels, std::size_t output_dim, std::uint64_t seed);
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

struct Backbone {
  BackboneConfig config;
  std::vector<Parameter> kernels;
  std::vector<Parameter> biases;

  std::vector<Parameter*> parameters();
};

/// Glorot-uniform kernels, zero biases, seeded from config.seed.
Backbone make_backbone(const std::string& name, const BackboneConfig& config);
Var backbone_forward(Tape& tape, const Backbone& backbone, Var image);

/// Checkpoint directory: header.json plus one tensor blob per parameter.
struct Checkpoint {
  nlohmann::json header;
  std::map<std::string, Tensor> tensors;
};

void save_checkpoint(const std::filesystem::path& dir, const nlohmann::json& header,
                     std::span<Parameter* const> params);
Checkpoint load_checkpoint(const std::filesystem::path& dir);
/// Copies tensors into parameters by name; every parameter must be present
/// with a matching shape.
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter* const> params);

}  // namespace vr
