#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "visreview/data.hpp"
#include "visreview/metrics.hpp"
#include "visreview/models.hpp"
#include "visreview/optim.hpp"

namespace vr {

struct ScoreRange {
  int low = 1;
  int high = 5;

  std::size_t levels() const { return static_cast<std::size_t>(high - low + 1); }
};

/// Architecture of every model in a run. With `extra_class` the higher model
/// gets one more output (and one more score model) than the dataset has
/// classes, reserved for out-of-catalog products.
struct ModelConfig {
  HigherConfig higher;
  ExtractorConfig extractor;
  LowerConfig lower;
  TilingSpec spec;
  ScoreRange scores;
  bool extra_class = false;

  void validate() const;
  std::size_t routed_classes() const { return higher.n_classes + (extra_class ? 1 : 0); }
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct HierarchicalModel {
  HigherModel higher;
  WindowExtractor fx;  // shared by every lower model
  std::vector<LowerModel> lowers;
  TilingSpec spec;
  ScoreRange scores;

  void validate() const;
};

/// Single-level ablation: one score model over all classes.
struct FlatModel {
  WindowExtractor fx;
  LowerModel lower;
  TilingSpec spec;
  ScoreRange scores;
};

HierarchicalModel make_hierarchical(const ModelConfig& config, std::uint64_t seed);
FlatModel make_flat(const ModelConfig& config, std::uint64_t seed);

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

struct Prediction {
  std::size_t product_class = 0;
  Tensor class_probs;
  int score = 1;
  Tensor score_probs;
};

using RouteObserver = std::function<void(std::size_t lower_index)>;

/// Eval-mode routing: class = argmax f_h(image), score from lowers[class].
Prediction predict(const HierarchicalModel& model, const Tensor& image, const RouteObserver& on_route = {});
/// Second stage of predict for given class probabilities.
Prediction route(const HierarchicalModel& model, const Tensor& image, const Tensor& class_probs,
                 const RouteObserver& on_route = {});
/// Score probabilities of one lower model, eval mode.
Tensor score_probabilities(const WindowExtractor& fx, const LowerModel& lower, const Tensor& image,
                           const TilingSpec& spec);

struct ScorePrediction {
  int score = 1;
  Tensor score_probs;
};

ScorePrediction predict_flat(const FlatModel& model, const Tensor& image);

/// Product of stage accuracies.
double combine_accuracy(double acc_higher, double mean_acc_lower);

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 30;
  AdamHyper adam;
  std::uint64_t seed = 1;
  bool freeze_fx = false;
  std::size_t threads = 1;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// What a fit run trains: the class router, one score model (with the shared
/// extractor), every score model at once with each sample routed by its true
/// class, or the flat ablation.
struct TrainTarget {
  enum class Kind { higher, lower, lowers, flat };
  Kind kind = Kind::higher;
  std::size_t index = 0;  // class for Kind::lower

  static TrainTarget parse(const std::string& text);
  std::string to_string() const;
};

struct TraceRow {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;
};

struct FitResult {
  std::size_t steps = 0;
  std::vector<TraceRow> trace;
};

std::string trace_csv(std::span<const TraceRow> trace);

/// Per-sample objective: builds the loss for training sample `i` on `tape`
/// and reports whether the prediction was correct.
using SampleLoss = std::function<Var(Tape& tape, std::size_t i, Mode mode, Rng& rng, bool& correct)>;

struct FitHooks {
  /// Called after every optimizer step with the averaged gradients.
  std::function<void(std::size_t step, std::span<const Tensor> grads)> on_step;
  /// Optional held-out evaluation appended to the trace after each epoch.
  std::function<TraceRow(std::size_t epoch)> validate;
  /// Checked after each epoch; returning true ends training early.
  std::function<bool(std::size_t epoch)> stop;
};

/// Mini-batch Adam over `params`: per-epoch seeded shuffle, gradients
/// averaged over each batch (the last batch may be smaller).
FitResult fit_objective(std::span<Parameter* const> params, std::size_t n_samples, const SampleLoss& loss,
                        const TrainConfig& config, const FitHooks& hooks = {});

/// Trains the slice of `model` selected by `target` on `train`. `val`, when
/// nonempty, adds validation rows to the trace.
FitResult fit(HierarchicalModel& model, TrainTarget target, std::span<const Sample* const> train,
              const TrainConfig& config, std::span<const Sample* const> val = {}, const FitHooks& hooks = {});
FitResult fit_flat(FlatModel& model, std::span<const Sample* const> train, const TrainConfig& config,
                   std::span<const Sample* const> val = {}, const FitHooks& hooks = {});

/// End-to-end routed predictions.
std::vector<PredictionRecord> evaluate_hierarchical(const HierarchicalModel& model,
                                                    std::span<const Sample* const> samples, std::size_t threads);
/// Score predictions from the lower model of each sample's true class; the
/// class fields carry the higher model's output.
std::vector<PredictionRecord> evaluate_oracle_routed(const HierarchicalModel& model,
                                                     std::span<const Sample* const> samples, std::size_t threads);
/// Flat model scores; class fields are copied from the ground truth.
std::vector<PredictionRecord> evaluate_flat(const FlatModel& model, std::span<const Sample* const> samples,
                                            std::size_t threads);

/// Assembles the report from routed and ground-truth-routed records.
MetricsReport build_report(std::span<const PredictionRecord> routed, std::span<const PredictionRecord> oracle,
                           std::size_t n_classes, int gamma,
                           std::optional<std::span<const PredictionRecord>> flat = std::nullopt);

/// Checkpoint layout under a root directory: higher/, fx/, lower_<i>/ and
/// flat/. A lower checkpoint names the extractor it was trained with.
void save_higher(const std::filesystem::path& dir, HigherModel& model, std::uint64_t seed);
void save_extractor(const std::filesystem::path& dir, WindowExtractor& fx, std::uint64_t seed);
void save_lower(const std::filesystem::path& dir, LowerModel& lower, const std::string& fx_name, std::uint64_t seed);
void save_flat(const std::filesystem::path& dir, FlatModel& model, std::uint64_t seed);

void load_higher(const std::filesystem::path& dir, HigherModel& model);
void load_extractor(const std::filesystem::path& dir, WindowExtractor& fx);
void load_lower(const std::filesystem::path& dir, LowerModel& lower);
void load_flat(const std::filesystem::path& dir, FlatModel& model);

std::string lower_dir_name(std::size_t index);

}  // namespace vr
