#include "visreview/models.hpp"

#include "visreview/error.hpp"

namespace vr {

void HigherConfig::validate() const {
  backbone.validate();
  if (n_classes == 0) fail(ErrorCode::InvalidConfig, "higher model needs at least one class");
  for (auto h : hidden) {
    if (h == 0) fail(ErrorCode::InvalidConfig, "higher model hidden sizes must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail(ErrorCode::InvalidRate, "higher model dropout must lie in [0, 1)");
}

std::vector<Parameter*> HigherModel::parameters() {
  auto out = backbone.parameters();
  for (auto& layer : head) {
    for (auto* p : layer.parameters()) out.push_back(p);
  }
  return out;
}

HigherModel make_higher(const HigherConfig& config, std::uint64_t seed) {
  config.validate();
  HigherModel model;
  model.config = config;
  BackboneConfig bb = config.backbone;
  bb.seed = seed ^ config.backbone.seed;
  model.backbone = make_backbone("higher.backbone", bb);
  Rng rng(seed, 0x68656164);
  std::size_t in = config.backbone.output_dim;
  for (std::size_t i = 0; i < config.hidden.size(); ++i) {
    model.head.push_back(make_dense("higher.dense" + std::to_string(i), in, config.hidden[i], Activation::mish, rng));
    in = config.hidden[i];
  }
  model.head.push_back(make_dense("higher.dense" + std::to_string(config.hidden.size()), in, config.n_classes,
                                  Activation::softmax, rng));
  return model;
}

Var higher_forward(Tape& tape, const HigherModel& model, const Tensor& image, Mode mode, Rng& rng) {
  Var x = backbone_forward(tape, model.backbone, tape.constant(image));
  const std::size_t layers = model.head.size();
  for (std::size_t i = 0; i < layers; ++i) {
    if (i + 3 >= layers) x = dropout(x, model.config.dropout, mode, rng);
    x = dense_forward(tape, model.head[i], x);
  }
  return x;
}

void ExtractorConfig::validate() const {
  backbone.validate();
  if (hidden.empty()) fail(ErrorCode::InvalidConfig, "window extractor needs at least one dense layer");
  for (auto h : hidden) {
    if (h == 0) fail(ErrorCode::InvalidConfig, "window extractor sizes must be positive");
  }
}

std::vector<Parameter*> WindowExtractor::parameters() {
  auto out = backbone.parameters();
  for (auto& layer : layers) {
    for (auto* p : layer.parameters()) out.push_back(p);
  }
  return out;
}

WindowExtractor make_extractor(const ExtractorConfig& config, std::uint64_t seed) {
  config.validate();
  WindowExtractor fx;
  fx.config = config;
  BackboneConfig bb = config.backbone;
  bb.seed = seed ^ config.backbone.seed;
  fx.backbone = make_backbone("fx.backbone", bb);
  Rng rng(seed, 0x66785f64);
  std::size_t in = config.backbone.output_dim;
  for (std::size_t i = 0; i < config.hidden.size(); ++i) {
    fx.layers.push_back(make_dense("fx.dense" + std::to_string(i), in, config.hidden[i], Activation::mish, rng));
    in = config.hidden[i];
  }
  return fx;
}

std::vector<Var> window_features(Tape& tape, const WindowExtractor& fx, const Tensor& image, const TilingSpec& spec) {
  std::vector<Var> features;
  for (Tensor& window : tile(image, spec)) {
    Var x = backbone_forward(tape, fx.backbone, tape.constant(std::move(window)));
    for (const auto& layer : fx.layers) x = dense_forward(tape, layer, x);
    features.push_back(x);
  }
  return features;
}

void LowerConfig::validate() const {
  if (input_dim == 0 || encoder_hidden == 0 || decoder_hidden == 0 || attention_dim == 0) {
    fail(ErrorCode::InvalidConfig, "lower model sizes must be positive");
  }
  if (score_levels < 2) fail(ErrorCode::InvalidConfig, "lower model needs at least two score levels");
}

std::vector<Parameter*> LowerModel::parameters() {
  std::vector<Parameter*> out;
  for (auto* p : encoder_forward.parameters()) out.push_back(p);
  for (auto* p : encoder_backward.parameters()) out.push_back(p);
  out.push_back(&attention_query);
  out.push_back(&attention_key);
  out.push_back(&attention_bias);
  out.push_back(&attention_score);
  for (auto* p : decoder.parameters()) out.push_back(p);
  for (auto* p : head.parameters()) out.push_back(p);
  return out;
}

LowerModel make_lower(const LowerConfig& config, const std::string& name, std::uint64_t seed) {
  config.validate();
  Rng rng(seed, 0x6c6f7765);
  const std::size_t annotation = 2 * config.encoder_hidden;
  LowerModel m;
  m.config = config;
  m.encoder_forward = make_gru(name + ".enc_fwd", config.input_dim, config.encoder_hidden, rng);
  m.encoder_backward = make_gru(name + ".enc_bwd", config.input_dim, config.encoder_hidden, rng);
  m.attention_query = {name + ".att.query",
                       glorot_uniform({config.attention_dim, config.decoder_hidden}, config.decoder_hidden,
                                      config.attention_dim, rng)};
  m.attention_key = {name + ".att.key",
                     glorot_uniform({config.attention_dim, annotation}, annotation, config.attention_dim, rng)};
  m.attention_bias = {name + ".att.bias", Tensor({config.attention_dim})};
  m.attention_score = {name + ".att.score", glorot_uniform({config.attention_dim}, config.attention_dim, 1, rng)};
  m.decoder = make_gru(name + ".dec", annotation, config.decoder_hidden, rng);
  m.head = make_dense(name + ".head", config.decoder_hidden, config.score_levels, Activation::softmax, rng);
  return m;
}

std::vector<Var> encode(Tape& tape, const LowerModel& model, std::span<const Var> xs) {
  if (xs.empty()) fail(ErrorCode::EmptySequence, "encode needs at least one window feature");
  const std::size_t steps = xs.size();
  const std::size_t hidden = model.config.encoder_hidden;
  std::vector<Var> forward(steps), backward(steps);
  Var h = tape.constant(Tensor({hidden}));
  for (std::size_t t = 0; t < steps; ++t) forward[t] = h = gru_step(tape, model.encoder_forward, xs[t], h);
  h = tape.constant(Tensor({hidden}));
  for (std::size_t t = steps; t-- > 0;) backward[t] = h = gru_step(tape, model.encoder_backward, xs[t], h);
  std::vector<Var> annotations;
  annotations.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) annotations.push_back(concat(forward[t], backward[t], 0));
  return annotations;
}

namespace {

// Keys W_k a_t depend only on the encoder output, so the decoder loop
// computes them once per sequence.
struct AttentionMemory {
  Var annotations;  // T_x x 2 H_e
  Var keys;         // T_x x H_a
};

AttentionMemory prepare_memory(Tape& tape, const LowerModel& model, std::span<const Var> annotations) {
  if (annotations.empty()) fail(ErrorCode::EmptySequence, "attention over an empty sequence");
  const std::size_t width = 2 * model.config.encoder_hidden;
  for (const Var& a : annotations) {
    if (a.value().rank() != 1 || a.value().dim(0) != width) {
      fail(ErrorCode::DimensionMismatch, "annotation length must be " + std::to_string(width));
    }
  }
  Var stacked = stack(annotations);
  return {stacked, matmul(stacked, transpose(tape.param(model.attention_key)))};
}

Attention attend_memory(Tape& tape, const LowerModel& model, Var r_prev, const AttentionMemory& memory) {
  if (r_prev.value().rank() != 1 || r_prev.value().dim(0) != model.config.decoder_hidden) {
    fail(ErrorCode::DimensionMismatch, "decoder state length must be " + std::to_string(model.config.decoder_hidden));
  }
  Var query = add(matmul(tape.param(model.attention_query), r_prev), tape.param(model.attention_bias));
  Var energies = matmul(tanh(add_rowwise(memory.keys, query)), tape.param(model.attention_score));
  Var alpha = softmax(energies);
  Var context = matmul(transpose(memory.annotations), alpha);
  return {alpha, context};
}

}  // namespace

Attention attend(Tape& tape, const LowerModel& model, Var r_prev, std::span<const Var> annotations) {
  return attend_memory(tape, model, r_prev, prepare_memory(tape, model, annotations));
}

Var decode(Tape& tape, const LowerModel& model, std::span<const Var> annotations, DecodeTrace* trace) {
  const AttentionMemory memory = prepare_memory(tape, model, annotations);
  Var r = tape.constant(Tensor({model.config.decoder_hidden}));
  const std::size_t steps = annotations.size();  // T_y = T_x
  for (std::size_t t = 0; t < steps; ++t) {
    const Attention att = attend_memory(tape, model, r, memory);
    r = gru_step(tape, model.decoder, att.context, r);
    if (trace) {
      ++trace->steps;
      trace->alphas.push_back(att.alpha.value());
    }
  }
  return dense_forward(tape, model.head, r);
}

Var lower_forward(Tape& tape, const WindowExtractor& fx, const LowerModel& model, const Tensor& image,
                  const TilingSpec& spec, DecodeTrace* trace) {
  const auto features = window_features(tape, fx, image, spec);
  const auto annotations = encode(tape, model, features);
  return decode(tape, model, annotations, trace);
}

Var model_loss(ModelKind kind, std::size_t target, Var probs) {
  const std::size_t classes = probs.value().size();
  if (target >= classes) {
    fail(ErrorCode::IndexOutOfRange, std::string(kind == ModelKind::higher ? "class" : "score") + " index " +
                                         std::to_string(target) + " outside [0, " + std::to_string(classes) + ")");
  }
  return cross_entropy(one_hot(target, classes), probs);
}

void to_json(nlohmann::json& j, const HigherConfig& c) {
  j = {{"backbone", c.backbone}, {"hidden", c.hidden}, {"n_classes", c.n_classes}, {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, HigherConfig& c) {
  c.backbone = j.at("backbone").get<BackboneConfig>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  c.n_classes = j.at("n_classes").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
}

void to_json(nlohmann::json& j, const ExtractorConfig& c) { j = {{"backbone", c.backbone}, {"hidden", c.hidden}}; }

void from_json(const nlohmann::json& j, ExtractorConfig& c) {
  c.backbone = j.at("backbone").get<BackboneConfig>();
  c.hidden = j.at("hidden").get<std::vector<std::size_t>>();
}

void to_json(nlohmann::json& j, const LowerConfig& c) {
  j = {{"input_dim", c.input_dim},           {"encoder_hidden", c.encoder_hidden},
       {"decoder_hidden", c.decoder_hidden}, {"attention_dim", c.attention_dim},
       {"score_levels", c.score_levels}};
}

void from_json(const nlohmann::json& j, LowerConfig& c) {
  c.input_dim = j.at("input_dim").get<std::size_t>();
  c.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
  c.decoder_hidden = j.at("decoder_hidden").get<std::size_t>();
  c.attention_dim = j.at("attention_dim").get<std::size_t>();
  c.score_levels = j.at("score_levels").get<std::size_t>();
}

}  // namespace vr
