#include "visreview/gradcheck.hpp"

#include <cmath>

#include "visreview/models.hpp"

namespace vr {

namespace {

Tensor random_tensor(const Tensor::Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Values at least `gap` away from zero, for ops with a kink there.
Tensor away_from_zero(const Tensor::Shape& shape, Rng& rng, double gap) {
  Tensor t(shape);
  for (auto& v : t.data()) {
    const double magnitude = rng.uniform(gap, 1.0);
    v = rng.bernoulli(0.5) ? magnitude : -magnitude;
  }
  return t;
}

void randomize(std::span<Parameter* const> params, Rng& rng, double scale = 0.5) {
  for (Parameter* p : params) {
    for (auto& v : p->value.data()) v = rng.uniform(-scale, scale);
  }
}

// Weighted sum with fixed random weights, so no output symmetry hides an error.
Var project(Tape& tape, Var y, const Tensor& weights) { return sum(mul(y, tape.constant(weights))); }

class Suite {
 public:
  Suite(const GradSuiteOptions& options, const std::function<void(const GradCase&)>& on_case)
      : options_(options), on_case_(on_case) {}

  void input(const std::string& name, const Tensor& x, const std::function<Var(Tape&, Var)>& f) {
    record(name, grad_check(f, x, options_.eps));
  }

  void params(const std::string& name, std::span<Parameter* const> ps, const std::function<Var(Tape&)>& f,
              std::size_t per_tensor = 0) {
    record(name, grad_check_params(f, ps, options_.eps, per_tensor, seed_));
  }

  void set_seed(std::uint64_t seed) { seed_ = seed; }
  std::vector<GradCase> take() { return std::move(cases_); }

 private:
  void record(const std::string& name, const GradCheckResult& result) {
    GradCase c{name, seed_, result, result.max_relative_error < options_.tolerance};
    if (on_case_) on_case_(c);
    cases_.push_back(std::move(c));
  }

  const GradSuiteOptions& options_;
  const std::function<void(const GradCase&)>& on_case_;
  std::uint64_t seed_ = 0;
  std::vector<GradCase> cases_;
};

void op_cases(Suite& suite, Rng& rng) {
  const Tensor b = random_tensor({4, 3}, rng);
  const Tensor w3x3 = random_tensor({3, 3}, rng);
  suite.input("op.matmul.left", random_tensor({3, 4}, rng),
              [&](Tape& t, Var x) { return project(t, matmul(x, t.constant(b)), w3x3); });
  const Tensor a = random_tensor({3, 4}, rng);
  suite.input("op.matmul.right", random_tensor({4, 3}, rng),
              [&](Tape& t, Var x) { return project(t, matmul(t.constant(a), x), w3x3); });
  const Tensor w3 = random_tensor({3}, rng);
  suite.input("op.matmul.vector", random_tensor({4}, rng),
              [&](Tape& t, Var x) { return project(t, matmul(t.constant(a), x), w3); });
  const Tensor w4x3 = random_tensor({4, 3}, rng);
  suite.input("op.transpose", random_tensor({3, 4}, rng),
              [&](Tape& t, Var x) { return project(t, transpose(x), w4x3); });

  const Tensor c = random_tensor({3, 4}, rng);
  const Tensor w3x4 = random_tensor({3, 4}, rng);
  suite.input("op.arithmetic", random_tensor({3, 4}, rng), [&](Tape& t, Var x) {
    Var k = t.constant(c);
    Var y = sub(mul(add(x, k), x), scale(k, 0.5));
    return project(t, mul(y, y), w3x4);
  });
  suite.input("op.sum_reshape", random_tensor({3, 4}, rng), [&](Tape& t, Var x) {
    return add(project(t, reshape(x, {4, 3}), w4x3), scale(sum(mul(x, x)), 0.3));
  });
  const Tensor w_stack = random_tensor({2, 4}, rng);
  suite.input("op.stack", random_tensor({4}, rng), [&](Tape& t, Var x) {
    const std::vector<Var> rows{x, mul(x, x)};
    return project(t, stack(rows), w_stack);
  });
  const Tensor w2x4 = random_tensor({2, 4}, rng);
  const Tensor m2x4 = random_tensor({2, 4}, rng);
  suite.input("op.add_rowwise", random_tensor({4}, rng), [&](Tape& t, Var x) {
    return project(t, mul(add_rowwise(t.constant(m2x4), x), add_rowwise(t.constant(m2x4), x)), w2x4);
  });

  const Tensor image = random_tensor({2, 7, 7}, rng);
  const Tensor kernels = random_tensor({3, 2, 3, 3}, rng);
  const Tensor w_s1 = random_tensor({3, 5, 5}, rng);
  const Tensor w_s2 = random_tensor({3, 3, 3}, rng);
  suite.input("op.conv2d.input", image,
              [&](Tape& t, Var x) { return project(t, conv2d(x, t.constant(kernels), 1), w_s1); });
  suite.input("op.conv2d.kernels", kernels,
              [&](Tape& t, Var k) { return project(t, conv2d(t.constant(image), k, 2), w_s2); });
  const Tensor conv_out = random_tensor({3, 5, 5}, rng);
  suite.input("op.add_channel_bias", random_tensor({3}, rng),
              [&](Tape& t, Var bias) { return project(t, add_channel_bias(t.constant(conv_out), bias), w_s1); });
  const Tensor w_pool = random_tensor({2, 3, 3}, rng);
  suite.input("op.avg_pool2d", image, [&](Tape& t, Var x) { return project(t, avg_pool2d(x, 3, 2), w_pool); });
  const Tensor w2 = random_tensor({2}, rng);
  suite.input("op.global_avg_pool", image, [&](Tape& t, Var x) { return project(t, global_avg_pool(x), w2); });
  const Tensor other = random_tensor({3}, rng);
  const Tensor w7 = random_tensor({7}, rng);
  suite.input("op.concat", random_tensor({4}, rng),
              [&](Tape& t, Var x) { return project(t, concat(x, t.constant(other), 0), w7); });

  const Tensor w6 = random_tensor({6}, rng);
  suite.input("op.sigmoid", random_tensor({6}, rng, -3, 3), [&](Tape& t, Var x) { return project(t, sigmoid(x), w6); });
  suite.input("op.tanh", random_tensor({6}, rng, -3, 3), [&](Tape& t, Var x) { return project(t, tanh(x), w6); });
  suite.input("op.relu", away_from_zero({6}, rng, 0.05), [&](Tape& t, Var x) { return project(t, relu(x), w6); });
  suite.input("op.mish", random_tensor({6}, rng, -4, 4), [&](Tape& t, Var x) { return project(t, mish(x), w6); });
  suite.input("op.softmax", random_tensor({6}, rng, -2, 2),
              [&](Tape& t, Var x) { return project(t, softmax(x), w6); });
  const Tensor target = one_hot(rng.below(6), 6);
  suite.input("op.cross_entropy", random_tensor({6}, rng, -2, 2),
              [&](Tape&, Var x) { return cross_entropy(target, softmax(x)); });
  const std::uint64_t mask_seed = rng.next_u64();
  suite.input("op.dropout", random_tensor({6}, rng), [&](Tape& t, Var x) {
    Rng mask(mask_seed);
    return project(t, dropout(x, 0.3, Mode::train, mask), w6);
  });
}

void layer_cases(Suite& suite, Rng& rng, std::size_t per_tensor) {
  Rng init(rng.next_u64());
  for (Activation act : {Activation::none, Activation::mish, Activation::softmax}) {
    DenseLayer layer = make_dense("dense", 5, 4, act, init);
    randomize(layer.parameters(), rng);
    const Tensor x = random_tensor({5}, rng);
    const Tensor w = random_tensor({4}, rng);
    const std::string name = "layer.dense." + to_string(act);
    suite.input(name + ".input", x, [&](Tape& t, Var v) { return project(t, dense_forward(t, layer, v), w); });
    suite.params(name + ".params", layer.parameters(),
                 [&](Tape& t) { return project(t, dense_forward(t, layer, t.constant(x)), w); });
  }

  GruCell cell = make_gru("gru", 4, 3, init);
  randomize(cell.parameters(), rng);
  const Tensor gx = random_tensor({4}, rng);
  const Tensor gh = random_tensor({3}, rng);
  const Tensor gw = random_tensor({3}, rng);
  suite.input("layer.gru.input", gx,
              [&](Tape& t, Var v) { return project(t, gru_step(t, cell, v, t.constant(gh)), gw); });
  suite.input("layer.gru.state", gh,
              [&](Tape& t, Var v) { return project(t, gru_step(t, cell, t.constant(gx), v), gw); });
  suite.params("layer.gru.params", cell.parameters(),
               [&](Tape& t) { return project(t, gru_step(t, cell, t.constant(gx), t.constant(gh)), gw); });

  BackboneConfig bb;
  bb.in_channels = 2;
  bb.stages = {{3, 3, 2}, {4, 3, 1}};
  bb.output_dim = 4;
  bb.seed = init.next_u64();
  Backbone backbone = make_backbone("bb", bb);
  randomize(backbone.parameters(), rng);
  const Tensor bimg = random_tensor({2, 9, 9}, rng, 0.0, 1.0);
  const Tensor bw = random_tensor({4}, rng);
  suite.input("layer.backbone.input", bimg,
              [&](Tape& t, Var v) { return project(t, backbone_forward(t, backbone, v), bw); });
  suite.params("layer.backbone.params", backbone.parameters(),
               [&](Tape& t) { return project(t, backbone_forward(t, backbone, t.constant(bimg)), bw); });

  LowerConfig lc;
  lc.input_dim = 3;
  lc.encoder_hidden = 3;
  lc.decoder_hidden = 4;
  lc.attention_dim = 3;
  LowerModel lower = make_lower(lc, "lower", init.next_u64());
  randomize(lower.parameters(), rng);
  const std::size_t steps = 4;
  std::vector<Parameter> inputs, annotations;
  for (std::size_t i = 0; i < steps; ++i) {
    inputs.push_back({"x" + std::to_string(i), random_tensor({lc.input_dim}, rng)});
    annotations.push_back({"a" + std::to_string(i), random_tensor({2 * lc.encoder_hidden}, rng)});
  }
  Parameter r_prev{"r_prev", random_tensor({lc.decoder_hidden}, rng)};
  auto leaves = [](Tape& t, std::vector<Parameter>& ps) {
    std::vector<Var> out;
    for (auto& p : ps) out.push_back(t.param(p));
    return out;
  };
  auto with = [](std::vector<Parameter*> base, std::vector<Parameter>& extra) {
    for (auto& p : extra) base.push_back(&p);
    return base;
  };

  const Tensor enc_w = random_tensor({2 * lc.encoder_hidden}, rng);
  auto encode_loss = [&](Tape& t) {
    const auto xs = leaves(t, inputs);
    const auto as = encode(t, lower, xs);
    Var total = project(t, as[0], enc_w);
    for (std::size_t i = 1; i < as.size(); ++i) total = add(total, scale(project(t, as[i], enc_w), 1.0 + 0.1 * i));
    return total;
  };
  suite.params("layer.encoder", with(lower.parameters(), inputs), encode_loss, per_tensor);

  const Tensor ctx_w = random_tensor({2 * lc.encoder_hidden}, rng);
  const Tensor alpha_w = random_tensor({steps}, rng);
  auto attend_loss = [&](Tape& t) {
    const auto as = leaves(t, annotations);
    const Attention att = attend(t, lower, t.param(r_prev), as);
    return add(project(t, att.context, ctx_w), project(t, att.alpha, alpha_w));
  };
  auto attention_params = with(lower.parameters(), annotations);
  attention_params.push_back(&r_prev);
  suite.params("layer.attention", attention_params, attend_loss, per_tensor);

  const std::size_t target = rng.below(lc.score_levels);
  auto decode_loss = [&](Tape& t) {
    const auto as = leaves(t, annotations);
    return model_loss(ModelKind::lower, target, decode(t, lower, as));
  };
  suite.params("layer.decoder", with(lower.parameters(), annotations), decode_loss, per_tensor);
}

void model_cases(Suite& suite, Rng& rng, std::size_t per_tensor) {
  HigherConfig hc;
  hc.n_classes = 23;
  HigherModel higher = make_higher(hc, rng.next_u64());
  Tensor image = random_tensor({1, 32, 32}, rng, 0.0, 1.0);
  const std::size_t cls = rng.below(hc.n_classes);
  const std::uint64_t dropout_seed = rng.next_u64();
  auto higher_loss = [&](Tape& t) {
    Rng mask(dropout_seed);
    return model_loss(ModelKind::higher, cls, higher_forward(t, higher, image, Mode::train, mask));
  };
  suite.params("model.higher", higher.parameters(), higher_loss, per_tensor);

  ExtractorConfig ec;
  WindowExtractor fx = make_extractor(ec, rng.next_u64());
  LowerConfig lc;
  LowerModel lower = make_lower(lc, "lower", rng.next_u64());
  const TilingSpec spec{32, 16, 8};
  const std::size_t score = rng.below(lc.score_levels);
  auto params = fx.parameters();
  for (auto* p : lower.parameters()) params.push_back(p);
  auto lower_loss = [&](Tape& t) {
    return model_loss(ModelKind::lower, score, lower_forward(t, fx, lower, image, spec));
  };
  suite.params("model.lower", params, lower_loss, per_tensor);
}

}  // namespace

std::vector<GradCase> run_gradient_suite(const GradSuiteOptions& options,
                                         const std::function<void(const GradCase&)>& on_case) {
  Suite suite(options, on_case);
  for (std::uint64_t seed : options.seeds) {
    suite.set_seed(seed);
    Rng rng(seed, 0x73756974);
    op_cases(suite, rng);
    layer_cases(suite, rng, 0);
    model_cases(suite, rng, options.model_coordinates);
  }
  return suite.take();
}

}  // namespace vr
