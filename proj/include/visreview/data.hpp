#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "visreview/tensor.hpp"

namespace vr {

enum class Origin { raw, augmented };

struct Sample {
  std::uint64_t id = 0;
  std::uint64_t parent_id = 0;  // own id for raw samples
  Origin origin = Origin::raw;
  std::size_t product_class = 0;
  int score = 1;
  Tensor image;  // C x H x H, values in [0, 1]
};

/// Procedural stand-in for a product-review image corpus.
///
/// Each class renders a distinct motif (shape kind, grating frequency and
/// orientation). A score s sets the damage intensity (5 - s) / 4, drawn as
/// a checkered occluder, additive noise, a brightness shift and scratch
/// strokes across the class's cue half. Which half (top or bottom) is a
/// fixed pseudo-random function of the class, unrelated to its motif. With
/// `decoys` on, the opposite half
/// carries the same kind of damage at an intensity unrelated to the score,
/// so reading the score requires knowing the class.
struct GeneratorConfig {
  std::size_t n_classes = 23;
  std::size_t per_score = 20;
  std::size_t image_size = 32;
  std::size_t channels = 1;
  std::size_t augment = 10;
  std::uint64_t seed = 7;
  bool decoys = true;
  int score_low = 1;
  int score_high = 5;

  void validate() const;
  std::size_t score_levels() const { return static_cast<std::size_t>(score_high - score_low + 1); }
  std::size_t raw_count() const { return n_classes * score_levels() * per_score; }
  std::size_t total_count() const { return raw_count() * (1 + augment); }
};

void to_json(nlohmann::json& j, const GeneratorConfig& c);
void from_json(const nlohmann::json& j, GeneratorConfig& c);

struct Dataset {
  GeneratorConfig config;
  std::vector<Sample> samples;
};

/// Damage intensity for a score: 0 at the top of the scale, 1 at the bottom.
double damage_intensity(int score, int score_low = 1, int score_high = 5);

/// The undamaged class motif.
Tensor render_motif(std::size_t product_class, const GeneratorConfig& config);
/// Half of the image (0 = top, 1 = bottom) that carries the class's score cue.
std::size_t cue_half(std::size_t product_class);

/// Raw samples only, ordered by (class, score, index); ids 0..raw_count-1.
Dataset generate_synthetic(const GeneratorConfig& config);
/// Raw samples followed by config.augment augmentations of each.
Dataset build_dataset(const GeneratorConfig& config);

struct AugmentParams {
  double rotation_deg = 0.0;
  double shift_x = 0.0;  // fraction of the image side
  double shift_y = 0.0;
  bool flip = false;
  double brightness = 1.0;
  double zoom = 1.0;
};

AugmentParams sample_augment_params(Rng& rng);
/// Flip, rotate, zoom and shift about the image centre (bilinear sampling,
/// zero fill), then scale brightness and clamp to [0, 1].
Tensor apply_augmentation(const Tensor& image, const AugmentParams& params);

/// `count` augmented copies of a raw sample with ids first_id, first_id+1, ...
std::vector<Sample> augment(const Sample& sample, std::size_t count, std::uint64_t seed, std::uint64_t first_id);

struct SplitRatio {
  std::size_t train = 3;
  std::size_t val = 1;
};

/// Indices into Dataset::samples.
struct DatasetSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Parent-disjoint split stratified by (class, score): each raw image and
/// all of its augmentations land on the same side.
DatasetSplit split_dataset(const Dataset& dataset, SplitRatio ratio, std::uint64_t seed);

std::vector<const Sample*> select(const Dataset& dataset, std::span<const std::size_t> indices);

/// Dataset pack: manifest.json + images.bin (concatenated tensor blobs).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace vr
