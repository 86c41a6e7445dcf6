#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "visreview/data.hpp"
#include "visreview/hierarchy.hpp"

namespace vr {

/// Everything a run needs besides the dataset pack. Model sizes that follow
/// from the dataset (class count, image size, channels, score range) are
/// derived rather than configured.
struct RunConfig {
  GeneratorConfig dataset;
  HigherConfig higher;
  ExtractorConfig extractor;
  std::size_t encoder_hidden = 32;
  std::size_t decoder_hidden = 32;
  std::size_t attention_dim = 32;
  std::size_t window = 16;
  std::size_t stride = 8;
  bool extra_class = false;
  TrainConfig train;
  SplitRatio split;
  int gamma = 1;
  std::string output_dir = "runs";
  std::uint64_t seed = 1;

  static RunConfig desk();
  static RunConfig paper();

  void validate() const;
  ModelConfig model() const;
  /// Training settings with the run seed applied.
  TrainConfig training(std::size_t threads) const;
};

nlohmann::ordered_json config_json(const RunConfig& config);
/// Overlays `text` on the desk defaults. Unknown keys, wrong types and
/// invalid values raise InvalidConfig.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::string& path);

}  // namespace vr
