#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "visreview/nn.hpp"
#include "visreview/tiler.hpp"

namespace vr {

/// Product-category classifier: backbone -> dense head ending in softmax
/// over n classes. Hidden head layers use mish, and dropout precedes each of
/// the last three dense layers.
struct HigherConfig {
  BackboneConfig backbone = BackboneConfig::small(1, 128, 1);
  std::vector<std::size_t> hidden{64, 32, 16};
  std::size_t n_classes = 23;
  double dropout = 0.2;

  void validate() const;
};

struct HigherModel {
  HigherConfig config;
  Backbone backbone;
  std::vector<DenseLayer> head;

  std::vector<Parameter*> parameters();
};

HigherModel make_higher(const HigherConfig& config, std::uint64_t seed);
Var higher_forward(Tape& tape, const HigherModel& model, const Tensor& image, Mode mode, Rng& rng);

/// Per-window feature network shared by every score model.
struct ExtractorConfig {
  BackboneConfig backbone = BackboneConfig::small(1, 128, 2);
  std::vector<std::size_t> hidden{64, 32};

  void validate() const;
  std::size_t feature_dim() const { return hidden.back(); }
};

struct WindowExtractor {
  ExtractorConfig config;
  Backbone backbone;
  std::vector<DenseLayer> layers;

  std::vector<Parameter*> parameters();
};

WindowExtractor make_extractor(const ExtractorConfig& config, std::uint64_t seed);
/// One feature vector per window of tile(image, spec), in window order.
std::vector<Var> window_features(Tape& tape, const WindowExtractor& fx, const Tensor& image, const TilingSpec& spec);

/// Attention encoder-decoder over window features. The alignment score is
/// e = v . tanh(W_q r_prev + W_k a + b).
struct LowerConfig {
  std::size_t input_dim = 32;
  std::size_t encoder_hidden = 32;
  std::size_t decoder_hidden = 32;
  std::size_t attention_dim = 32;
  std::size_t score_levels = 5;

  void validate() const;
};

struct LowerModel {
  LowerConfig config;
  GruCell encoder_forward;
  GruCell encoder_backward;
  Parameter attention_query;  // H_a x H_d
  Parameter attention_key;    // H_a x 2 H_e
  Parameter attention_bias;   // H_a
  Parameter attention_score;  // H_a
  GruCell decoder;            // input 2 H_e, hidden H_d
  DenseLayer head;            // H_d -> k, softmax

  std::vector<Parameter*> parameters();
};

LowerModel make_lower(const LowerConfig& config, const std::string& name, std::uint64_t seed);

/// Bidirectional encoding: a_t = [forward_t ; backward_t], both directions
/// starting from zero state.
std::vector<Var> encode(Tape& tape, const LowerModel& model, std::span<const Var> xs);

struct Attention {
  Var alpha;    // T_x
  Var context;  // 2 H_e
};

Attention attend(Tape& tape, const LowerModel& model, Var r_prev, std::span<const Var> annotations);

/// Per-pass instrumentation for the decoder loop.
struct DecodeTrace {
  std::size_t steps = 0;
  std::vector<Tensor> alphas;
};

/// T_y = T_x decoder steps from a zero state, then softmax(head(r_T)).
Var decode(Tape& tape, const LowerModel& model, std::span<const Var> annotations, DecodeTrace* trace = nullptr);

Var lower_forward(Tape& tape, const WindowExtractor& fx, const LowerModel& model, const Tensor& image,
                  const TilingSpec& spec, DecodeTrace* trace = nullptr);

enum class ModelKind { higher, lower };

/// Cross-entropy between onehot(target) and the predicted distribution.
Var model_loss(ModelKind kind, std::size_t target, Var probs);

void to_json(nlohmann::json& j, const HigherConfig& c);
void from_json(const nlohmann::json& j, HigherConfig& c);
void to_json(nlohmann::json& j, const ExtractorConfig& c);
void from_json(const nlohmann::json& j, ExtractorConfig& c);
void to_json(nlohmann::json& j, const LowerConfig& c);
void from_json(const nlohmann::json& j, LowerConfig& c);

}  // namespace vr
