#include "visreview/hierarchy.hpp"

#include <numeric>

#include "visreview/error.hpp"
#include "visreview/parallel.hpp"

namespace vr {

namespace {

constexpr std::uint64_t kShuffleStream = 0x736875;
constexpr std::uint64_t kDropoutStream = 0x64726f70;

std::size_t score_index(const Sample& s, const ScoreRange& scores) {
  if (s.score < scores.low || s.score > scores.high) {
    fail(ErrorCode::LabelOutOfRange, "sample " + std::to_string(s.id) + " has score " + std::to_string(s.score) +
                                         " outside [" + std::to_string(scores.low) + ", " +
                                         std::to_string(scores.high) + "]");
  }
  return static_cast<std::size_t>(s.score - scores.low);
}

void check_class(const Sample& s, std::size_t n_classes) {
  if (s.product_class >= n_classes) {
    fail(ErrorCode::LabelOutOfRange, "sample " + std::to_string(s.id) + " has class " +
                                         std::to_string(s.product_class) + " but the model routes " +
                                         std::to_string(n_classes));
  }
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::size_t argmax(const Tensor& t) { return vr::argmax(t.data()); }

void append(std::vector<Parameter*>& out, std::vector<Parameter*> more) {
  out.insert(out.end(), more.begin(), more.end());
}

// Eval-mode pass over a held-out set, reported as one trace row.
TraceRow evaluate_objective(const SampleLoss& loss, std::size_t n, std::size_t epoch, std::size_t threads) {
  std::vector<double> losses(n);
  std::vector<char> correct(n);
  parallel_for(n, threads, [&](std::size_t i) {
    Tape tape;
    Rng rng(0);
    bool ok = false;
    losses[i] = loss(tape, i, Mode::eval, rng, ok).value().item();
    correct[i] = ok;
  });
  TraceRow row{epoch, "val", 0.0, 0.0};
  for (std::size_t i = 0; i < n; ++i) {
    row.loss += losses[i];
    row.accuracy += correct[i];
  }
  if (n > 0) {
    row.loss /= static_cast<double>(n);
    row.accuracy /= static_cast<double>(n);
  }
  return row;
}

nlohmann::json spec_json(const TilingSpec& s) {
  return {{"image_size", s.image_size}, {"window", s.window}, {"stride", s.stride}};
}

void check_header(const Checkpoint& ckpt, const std::string& kind, const std::filesystem::path& dir) {
  if (!ckpt.header.contains("model") || ckpt.header.at("model") != kind) {
    fail(ErrorCode::CorruptManifest, dir.string() + " does not hold a " + kind + " checkpoint");
  }
}

}  // namespace

void ModelConfig::validate() const {
  higher.validate();
  extractor.validate();
  lower.validate();
  spec.validate();
  if (scores.high <= scores.low) fail(ErrorCode::InvalidConfig, "score range must hold at least two values");
  if (lower.input_dim != extractor.feature_dim()) {
    fail(ErrorCode::InvalidConfig, "lower input_dim must equal the window extractor's output size");
  }
  if (lower.score_levels != scores.levels()) {
    fail(ErrorCode::InvalidConfig, "lower score_levels must equal the size of the score range");
  }
  if (higher.backbone.in_channels != extractor.backbone.in_channels) {
    fail(ErrorCode::InvalidConfig, "higher and extractor backbones must read the same channel count");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"higher", c.higher},
       {"extractor", c.extractor},
       {"lower", c.lower},
       {"spec", spec_json(c.spec)},
       {"score_low", c.scores.low},
       {"score_high", c.scores.high},
       {"extra_class", c.extra_class}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.higher = j.at("higher").get<HigherConfig>();
  c.extractor = j.at("extractor").get<ExtractorConfig>();
  c.lower = j.at("lower").get<LowerConfig>();
  const auto& s = j.at("spec");
  c.spec = {s.at("image_size").get<std::size_t>(), s.at("window").get<std::size_t>(),
            s.at("stride").get<std::size_t>()};
  c.scores = {j.at("score_low").get<int>(), j.at("score_high").get<int>()};
  c.extra_class = j.at("extra_class").get<bool>();
}

void HierarchicalModel::validate() const {
  if (lowers.size() != higher.config.n_classes) {
    fail(ErrorCode::InvalidConfig, "need one lower model per routed class: " + std::to_string(lowers.size()) +
                                       " vs " + std::to_string(higher.config.n_classes));
  }
  for (const auto& lower : lowers) {
    if (lower.config.score_levels != scores.levels()) {
      fail(ErrorCode::InvalidConfig, "lower model score levels differ from the score range");
    }
    if (lower.config.input_dim != fx.config.feature_dim()) {
      fail(ErrorCode::InvalidConfig, "lower model input size differs from the shared extractor");
    }
  }
}

HierarchicalModel make_hierarchical(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  HierarchicalModel m;
  HigherConfig higher = config.higher;
  higher.n_classes = config.routed_classes();
  m.higher = make_higher(higher, mix64(seed ^ 0x1));
  m.fx = make_extractor(config.extractor, mix64(seed ^ 0x2));
  for (std::size_t i = 0; i < higher.n_classes; ++i) {
    m.lowers.push_back(make_lower(config.lower, "lower" + std::to_string(i), mix64(seed ^ (0x100 + i))));
  }
  m.spec = config.spec;
  m.scores = config.scores;
  m.validate();
  return m;
}

FlatModel make_flat(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  FlatModel m;
  m.fx = make_extractor(config.extractor, mix64(seed ^ 0x2));
  m.lower = make_lower(config.lower, "flat", mix64(seed ^ 0x3));
  m.spec = config.spec;
  m.scores = config.scores;
  return m;
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) fail(ErrorCode::EmptyInput, "argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

Tensor score_probabilities(const WindowExtractor& fx, const LowerModel& lower, const Tensor& image,
                           const TilingSpec& spec) {
  Tape tape;
  return lower_forward(tape, fx, lower, image, spec).value();
}

Prediction route(const HierarchicalModel& model, const Tensor& image, const Tensor& class_probs,
                 const RouteObserver& on_route) {
  if (class_probs.size() != model.lowers.size()) {
    fail(ErrorCode::DimensionMismatch, std::to_string(class_probs.size()) + " class probabilities for " +
                                           std::to_string(model.lowers.size()) + " lower models");
  }
  Prediction p;
  p.class_probs = class_probs;
  p.product_class = argmax(class_probs);
  if (on_route) on_route(p.product_class);
  p.score_probs = score_probabilities(model.fx, model.lowers[p.product_class], image, model.spec);
  p.score = model.scores.low + static_cast<int>(argmax(p.score_probs));
  return p;
}

Prediction predict(const HierarchicalModel& model, const Tensor& image, const RouteObserver& on_route) {
  Tape tape;
  Rng unused(0);
  const Tensor class_probs = higher_forward(tape, model.higher, image, Mode::eval, unused).value();
  return route(model, image, class_probs, on_route);
}

ScorePrediction predict_flat(const FlatModel& model, const Tensor& image) {
  ScorePrediction p;
  p.score_probs = score_probabilities(model.fx, model.lower, image, model.spec);
  p.score = model.scores.low + static_cast<int>(argmax(p.score_probs));
  return p;
}

double combine_accuracy(double acc_higher, double mean_acc_lower) {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(acc_higher) || !in_unit(mean_acc_lower)) {
    fail(ErrorCode::OutOfRange, "accuracies must lie in [0, 1]");
  }
  return acc_higher * mean_acc_lower;
}

void TrainConfig::validate() const {
  if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch_size must be at least 1");
  if (epochs < 1) fail(ErrorCode::InvalidConfig, "epochs must be at least 1");
  if (!(adam.learning_rate > 0.0)) fail(ErrorCode::InvalidConfig, "learning rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    fail(ErrorCode::InvalidConfig, "Adam betas must lie in [0, 1)");
  }
  if (!(adam.epsilon > 0.0)) fail(ErrorCode::InvalidConfig, "Adam epsilon must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"learning_rate", c.adam.learning_rate},
       {"beta1", c.adam.beta1},
       {"beta2", c.adam.beta2},
       {"epsilon", c.adam.epsilon},
       {"seed", c.seed},
       {"freeze_fx", c.freeze_fx}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.at("batch_size").get<std::size_t>();
  c.epochs = j.at("epochs").get<std::size_t>();
  c.adam.learning_rate = j.at("learning_rate").get<double>();
  c.adam.beta1 = j.at("beta1").get<double>();
  c.adam.beta2 = j.at("beta2").get<double>();
  c.adam.epsilon = j.at("epsilon").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.freeze_fx = j.at("freeze_fx").get<bool>();
}

TrainTarget TrainTarget::parse(const std::string& text) {
  if (text == "higher") return {Kind::higher, 0};
  if (text == "lowers") return {Kind::lowers, 0};
  if (text == "flat") return {Kind::flat, 0};
  if (text.rfind("lower:", 0) == 0) {
    const std::string digits = text.substr(6);
    if (!digits.empty() && digits.find_first_not_of("0123456789") == std::string::npos && digits.size() < 10) {
      return {Kind::lower, std::stoul(digits)};
    }
  }
  fail(ErrorCode::InvalidConfig, "unknown train target '" + text + "' (higher, lower:<i>, lowers or flat)");
}

std::string TrainTarget::to_string() const {
  switch (kind) {
    case Kind::higher: return "higher";
    case Kind::lower: return "lower:" + std::to_string(index);
    case Kind::lowers: return "lowers";
    case Kind::flat: return "flat";
  }
  return "";
}

std::string trace_csv(std::span<const TraceRow> trace) {
  std::string out = "epoch,split,loss,accuracy\n";
  for (const auto& row : trace) {
    out += std::to_string(row.epoch) + "," + row.split + "," + format_fixed4(row.loss) + "," +
           format_fixed4(row.accuracy) + "\n";
  }
  return out;
}

FitResult fit_objective(std::span<Parameter* const> params, std::size_t n_samples, const SampleLoss& loss,
                        const TrainConfig& config, const FitHooks& hooks) {
  config.validate();
  if (n_samples == 0) fail(ErrorCode::EmptyDataset, "nothing to train on");
  AdamState state(params, config.adam);
  std::vector<std::size_t> order(n_samples);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const Rng shuffle_base(config.seed, kShuffleStream);
  const Rng dropout_base(config.seed, kDropoutStream);
  FitResult result;
  std::vector<Tensor> grads;
  for (Parameter* p : params) grads.push_back(zeros_like(p->value));

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    Rng shuffle_rng = shuffle_base.split(epoch);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct_sum = 0;
    for (std::size_t start = 0; start < n_samples; start += config.batch_size) {
      const std::size_t batch = std::min(config.batch_size, n_samples - start);
      // Only parameters reached by a sample's loss carry a gradient; the
      // rest stay implicit zeros, which matters when most of the models in
      // `params` are idle for a given sample.
      std::vector<std::vector<std::pair<std::size_t, Tensor>>> sample_grads(batch);
      std::vector<double> losses(batch);
      std::vector<char> correct(batch);
      parallel_for(batch, config.threads, [&](std::size_t k) {
        Tape tape;
        Rng rng = dropout_base.split((epoch - 1) * n_samples + start + k);
        bool ok = false;
        Var l = loss(tape, order[start + k], Mode::train, rng, ok);
        losses[k] = l.value().item();
        correct[k] = ok;
        const Gradients g = tape.backward(l);
        for (std::size_t p = 0; p < params.size(); ++p) {
          const auto node = tape.param_node(*params[p]);
          if (!node) continue;
          if (const Tensor* grad = g.find(*node)) sample_grads[k].emplace_back(p, *grad);
        }
      });
      // summed in batch order so the result does not depend on worker timing
      for (auto& g : grads) std::fill(g.data().begin(), g.data().end(), 0.0);
      for (std::size_t k = 0; k < batch; ++k) {
        for (const auto& [p, grad] : sample_grads[k]) {
          auto dst = grads[p].data();
          auto src = grad.data();
          for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
        }
      }
      const double inv = 1.0 / static_cast<double>(batch);
      for (auto& g : grads) {
        for (auto& v : g.data()) v *= inv;
      }
      adam_step(params, grads, state);
      ++result.steps;
      if (hooks.on_step) hooks.on_step(result.steps, grads);
      for (std::size_t k = 0; k < batch; ++k) {
        loss_sum += losses[k];
        correct_sum += static_cast<std::size_t>(correct[k]);
      }
    }
    result.trace.push_back({epoch, "train", loss_sum / static_cast<double>(n_samples),
                            static_cast<double>(correct_sum) / static_cast<double>(n_samples)});
    if (hooks.validate) result.trace.push_back(hooks.validate(epoch));
    if (hooks.stop && hooks.stop(epoch)) break;
  }
  return result;
}

FitResult fit(HierarchicalModel& model, TrainTarget target, std::span<const Sample* const> train,
              const TrainConfig& config, std::span<const Sample* const> val, const FitHooks& hooks) {
  model.validate();
  const std::size_t n_classes = model.lowers.size();
  for (const Sample* s : train) {
    check_class(*s, n_classes);
    score_index(*s, model.scores);
  }

  std::vector<Parameter*> params;
  std::vector<const Sample*> train_set(train.begin(), train.end());
  std::vector<const Sample*> val_set(val.begin(), val.end());
  auto keep_class = [](std::vector<const Sample*>& set, std::size_t c) {
    std::erase_if(set, [c](const Sample* s) { return s->product_class != c; });
  };

  std::function<Var(Tape&, const Sample&, Mode, Rng&, bool&)> objective;
  switch (target.kind) {
    case TrainTarget::Kind::higher:
      params = model.higher.parameters();
      objective = [&model](Tape& tape, const Sample& s, Mode mode, Rng& rng, bool& correct) {
        Var probs = higher_forward(tape, model.higher, s.image, mode, rng);
        correct = argmax(probs.value()) == s.product_class;
        return model_loss(ModelKind::higher, s.product_class, probs);
      };
      break;
    case TrainTarget::Kind::lower:
    case TrainTarget::Kind::lowers:
      if (target.kind == TrainTarget::Kind::lower) {
        if (target.index >= n_classes) {
          fail(ErrorCode::IndexOutOfRange, "no lower model " + std::to_string(target.index));
        }
        keep_class(train_set, target.index);
        keep_class(val_set, target.index);
        params = model.lowers[target.index].parameters();
      } else {
        for (auto& lower : model.lowers) append(params, lower.parameters());
      }
      if (!config.freeze_fx) append(params, model.fx.parameters());
      objective = [&model](Tape& tape, const Sample& s, Mode, Rng&, bool& correct) {
        Var probs = lower_forward(tape, model.fx, model.lowers[s.product_class], s.image, model.spec);
        const std::size_t label = score_index(s, model.scores);
        correct = argmax(probs.value()) == label;
        return model_loss(ModelKind::lower, label, probs);
      };
      break;
    case TrainTarget::Kind::flat:
      fail(ErrorCode::InvalidArgument, "the flat model trains through fit_flat");
  }
  if (train_set.empty()) fail(ErrorCode::EmptyDataset, "no training samples for target " + target.to_string());

  FitHooks full = hooks;
  if (!val_set.empty() && !full.validate) {
    full.validate = [&](std::size_t epoch) {
      return evaluate_objective(
          [&](Tape& tape, std::size_t i, Mode mode, Rng& rng, bool& ok) {
            return objective(tape, *val_set[i], mode, rng, ok);
          },
          val_set.size(), epoch, config.threads);
    };
  }
  return fit_objective(
      params, train_set.size(),
      [&](Tape& tape, std::size_t i, Mode mode, Rng& rng, bool& ok) {
        return objective(tape, *train_set[i], mode, rng, ok);
      },
      config, full);
}

FitResult fit_flat(FlatModel& model, std::span<const Sample* const> train, const TrainConfig& config,
                   std::span<const Sample* const> val, const FitHooks& hooks) {
  if (train.empty()) fail(ErrorCode::EmptyDataset, "no training samples for the flat model");
  for (const Sample* s : train) score_index(*s, model.scores);
  std::vector<Parameter*> params = model.lower.parameters();
  if (!config.freeze_fx) append(params, model.fx.parameters());
  auto objective = [&model](Tape& tape, const Sample& s, bool& correct) {
    Var probs = lower_forward(tape, model.fx, model.lower, s.image, model.spec);
    const std::size_t label = score_index(s, model.scores);
    correct = argmax(probs.value()) == label;
    return model_loss(ModelKind::lower, label, probs);
  };
  FitHooks full = hooks;
  if (!val.empty() && !full.validate) {
    full.validate = [&](std::size_t epoch) {
      return evaluate_objective(
          [&](Tape& tape, std::size_t i, Mode, Rng&, bool& ok) { return objective(tape, *val[i], ok); }, val.size(),
          epoch, config.threads);
    };
  }
  return fit_objective(
      params, train.size(),
      [&](Tape& tape, std::size_t i, Mode, Rng&, bool& ok) { return objective(tape, *train[i], ok); }, config,
      full);
}

std::vector<PredictionRecord> evaluate_hierarchical(const HierarchicalModel& model,
                                                    std::span<const Sample* const> samples, std::size_t threads) {
  std::vector<PredictionRecord> records(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Sample& s = *samples[i];
    const Prediction p = predict(model, s.image);
    records[i] = {s.id,    s.product_class, p.product_class, values(p.class_probs),
                  s.score, p.score,         values(p.score_probs)};
  });
  return records;
}

std::vector<PredictionRecord> evaluate_oracle_routed(const HierarchicalModel& model,
                                                     std::span<const Sample* const> samples, std::size_t threads) {
  std::vector<PredictionRecord> records(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Sample& s = *samples[i];
    check_class(s, model.lowers.size());
    Tape tape;
    Rng unused(0);
    const Tensor class_probs = higher_forward(tape, model.higher, s.image, Mode::eval, unused).value();
    const Tensor score_probs = score_probabilities(model.fx, model.lowers[s.product_class], s.image, model.spec);
    records[i] = {s.id,
                  s.product_class,
                  argmax(class_probs),
                  values(class_probs),
                  s.score,
                  model.scores.low + static_cast<int>(argmax(score_probs)),
                  values(score_probs)};
  });
  return records;
}

std::vector<PredictionRecord> evaluate_flat(const FlatModel& model, std::span<const Sample* const> samples,
                                            std::size_t threads) {
  std::vector<PredictionRecord> records(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    const Sample& s = *samples[i];
    const ScorePrediction p = predict_flat(model, s.image);
    records[i] = {s.id, s.product_class, s.product_class, {}, s.score, p.score, values(p.score_probs)};
  });
  return records;
}

MetricsReport build_report(std::span<const PredictionRecord> routed, std::span<const PredictionRecord> oracle,
                           std::size_t n_classes, int gamma, std::optional<std::span<const PredictionRecord>> flat) {
  MetricsReport r;
  r.kind = flat ? "ablate" : "eval";
  r.samples = routed.size();
  r.gamma = gamma;
  if (!routed.empty()) {
    const std::size_t labels = routed.front().class_probs.size();
    r.top1 = topk_accuracy(routed, 1, LabelField::product_class);
    r.top5 = topk_accuracy(routed, std::min<std::size_t>(5, labels), LabelField::product_class);
  }
  r.lower = per_class_summary(oracle, n_classes, gamma);
  r.hierarchical_accuracy = exact_score_accuracy(routed);
  r.hierarchical_relaxed_accuracy = relaxed_accuracy(routed, gamma);
  r.combined_accuracy = combine_accuracy(r.top1, r.lower.mean_accuracy);
  r.confusion = confusion_matrix(routed, n_classes);
  if (flat) {
    r.flat_accuracy = exact_score_accuracy(*flat);
    r.flat_relaxed_accuracy = relaxed_accuracy(*flat, gamma);
    if (*r.flat_accuracy > 0.0) r.improvement = improvement_ratio(r.hierarchical_accuracy, *r.flat_accuracy);
  }
  return r;
}

std::string lower_dir_name(std::size_t index) { return "lower_" + std::to_string(index); }

void save_higher(const std::filesystem::path& dir, HigherModel& model, std::uint64_t seed) {
  const nlohmann::json header = {{"model", "higher"}, {"config", model.config}, {"seed", seed}};
  save_checkpoint(dir, header, model.parameters());
}

void save_extractor(const std::filesystem::path& dir, WindowExtractor& fx, std::uint64_t seed) {
  const nlohmann::json header = {{"model", "extractor"}, {"config", fx.config}, {"seed", seed}};
  save_checkpoint(dir, header, fx.parameters());
}

void save_lower(const std::filesystem::path& dir, LowerModel& lower, const std::string& fx_name, std::uint64_t seed) {
  const nlohmann::json header = {
      {"model", "lower"}, {"config", lower.config}, {"shared_fx", fx_name}, {"seed", seed}};
  save_checkpoint(dir, header, lower.parameters());
}

void save_flat(const std::filesystem::path& dir, FlatModel& model, std::uint64_t seed) {
  auto params = model.lower.parameters();
  append(params, model.fx.parameters());
  const nlohmann::json header = {{"model", "flat"},
                                 {"config", model.lower.config},
                                 {"extractor", model.fx.config},
                                 {"spec", spec_json(model.spec)},
                                 {"seed", seed}};
  save_checkpoint(dir, header, params);
}

void load_higher(const std::filesystem::path& dir, HigherModel& model) {
  const Checkpoint ckpt = load_checkpoint(dir);
  check_header(ckpt, "higher", dir);
  restore_parameters(ckpt, model.parameters());
}

void load_extractor(const std::filesystem::path& dir, WindowExtractor& fx) {
  const Checkpoint ckpt = load_checkpoint(dir);
  check_header(ckpt, "extractor", dir);
  restore_parameters(ckpt, fx.parameters());
}

void load_lower(const std::filesystem::path& dir, LowerModel& lower) {
  const Checkpoint ckpt = load_checkpoint(dir);
  check_header(ckpt, "lower", dir);
  restore_parameters(ckpt, lower.parameters());
}

void load_flat(const std::filesystem::path& dir, FlatModel& model) {
  const Checkpoint ckpt = load_checkpoint(dir);
  check_header(ckpt, "flat", dir);
  auto params = model.lower.parameters();
  append(params, model.fx.parameters());
  restore_parameters(ckpt, params);
}

}  // namespace vr
