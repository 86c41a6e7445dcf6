#include <doctest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "visreview/error.hpp"
#include "visreview/models.hpp"
#include "test_util.hpp"

using namespace vr;
using vrtest::max_abs_diff;
using vrtest::random_tensor;

namespace {

void zero_all(std::vector<Parameter*> params) {
  for (Parameter* p : params) p->value = zeros_like(p->value);
}

void randomize(std::vector<Parameter*> params, Rng& rng, double scale = 0.5) {
  for (Parameter* p : params)
    for (double& v : p->value.data()) v = rng.uniform(-scale, scale);
}

LowerConfig small_lower(std::size_t input_dim = 6) {
  LowerConfig c;
  c.input_dim = input_dim;
  c.encoder_hidden = 4;
  c.decoder_hidden = 5;
  c.attention_dim = 3;
  return c;
}

std::vector<Var> variables(Tape& tape, std::size_t n, std::size_t dim, Rng& rng) {
  std::vector<Var> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(tape.variable(random_tensor({dim}, rng)));
  return out;
}

double sum_of(const Tensor& t) { return std::accumulate(t.data().begin(), t.data().end(), 0.0); }

// Plain-loop GRU step.
Tensor gru_oracle(const GruCell& c, const Tensor& x, const Tensor& h) {
  const std::size_t n = c.hidden_dim(), m = c.input_dim();
  auto gate = [&](const Parameter& w, const Parameter& u, const Parameter& b, const Tensor& s, std::size_t i) {
    double acc = b.value[i];
    for (std::size_t j = 0; j < m; ++j) acc += w.value[i * m + j] * x[j];
    for (std::size_t j = 0; j < n; ++j) acc += u.value[i * n + j] * s[j];
    return acc;
  };
  Tensor z({n}), r({n}), rh({n}), out({n});
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = 1.0 / (1.0 + std::exp(-gate(c.wz, c.uz, c.bz, h, i)));
    r[i] = 1.0 / (1.0 + std::exp(-gate(c.wr, c.ur, c.br, h, i)));
    rh[i] = r[i] * h[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double cand = std::tanh(gate(c.wh, c.uh, c.bh, rh, i));
    out[i] = (1.0 - z[i]) * h[i] + z[i] * cand;
  }
  return out;
}

}  // namespace

TEST_CASE("glorot initialisation") {
  Rng a(7), b(7);
  const DenseLayer l1 = make_dense("d", 4, 3, Activation::none, a);
  const DenseLayer l2 = make_dense("d", 4, 3, Activation::none, b);
  CHECK(l1.weight.value == l2.weight.value);
  CHECK(l1.weight.value.shape() == Tensor::Shape{3, 4});
  CHECK(l1.bias.value.shape() == Tensor::Shape{3});
  for (double v : l1.weight.value.data()) CHECK(std::abs(v) <= std::sqrt(6.0 / 7.0));

  Rng rng(1);
  const Tensor w = glorot_uniform({100, 100}, 100, 100, rng);
  const double bound = std::sqrt(6.0 / 200.0);
  const double sigma = bound / std::sqrt(3.0) / std::sqrt(1e4);
  CHECK(std::abs(sum_of(w) / 1e4) < 3.0 * sigma);
}

TEST_CASE("dense layer") {
  Rng rng(3);
  DenseLayer layer = make_dense("d", 4, 4, Activation::none, rng);
  const Tensor x = random_tensor({4}, rng);
  {
    DenseLayer id = layer;
    id.weight.value = Tensor({4, 4});
    for (std::size_t i = 0; i < 4; ++i) id.weight.value[i * 5] = 1.0;
    Tape tape;
    CHECK(dense_forward(tape, id, tape.constant(x)).value() == x);
  }
  {
    DenseLayer c = layer;
    c.weight.value = Tensor({4, 4});
    c.bias.value = Tensor({4}, 0.3);
    Tape tape;
    CHECK(dense_forward(tape, c, tape.constant(x)).value() == Tensor({4}, 0.3));
  }
  layer.bias.value = random_tensor({4}, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor u = random_tensor({4}, rng), v = random_tensor({4}, rng);
    const double alpha = rng.uniform(-2, 2), beta = rng.uniform(-2, 2);
    Tensor mix({4});
    for (std::size_t i = 0; i < 4; ++i) mix[i] = alpha * u[i] + beta * v[i];
    Tape tape;
    const Tensor fm = dense_forward(tape, layer, tape.constant(mix)).value();
    const Tensor fu = dense_forward(tape, layer, tape.constant(u)).value();
    const Tensor fv = dense_forward(tape, layer, tape.constant(v)).value();
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(std::abs(fm[i] - (alpha * fu[i] + beta * fv[i] - (alpha + beta - 1) * layer.bias.value[i])) < 1e-10);
      // matmul + add oracle
      double acc = layer.bias.value[i];
      for (std::size_t j = 0; j < 4; ++j) acc += layer.weight.value[i * 4 + j] * u[j];
      CHECK(std::abs(fu[i] - acc) < 1e-12);
    }
  }
  Tape tape;
  CHECK_THROWS_AS(dense_forward(tape, layer, tape.constant(Tensor({3}))), Error);
}

TEST_CASE("gru step") {
  Rng rng(5);
  GruCell cell = make_gru("g", 3, 4, rng);
  const Tensor x = random_tensor({3}, rng), h = random_tensor({4}, rng);
  {
    Tape tape;
    CHECK(max_abs_diff(gru_step(tape, cell, tape.constant(x), tape.constant(h)).value(), gru_oracle(cell, x, h)) <
          1e-12);
  }
  GruCell zero = cell;
  zero_all(zero.parameters());
  {
    Tape tape;
    const Tensor out = gru_step(tape, zero, tape.constant(x), tape.constant(h)).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.5 * h[i]).epsilon(1e-15));
    CHECK(gru_step(tape, zero, tape.constant(x), tape.constant(Tensor({4}))).value() == Tensor({4}));
  }
  GruCell closed = cell;
  closed.bz.value = Tensor({4}, -50.0);
  {
    Tape tape;
    CHECK(max_abs_diff(gru_step(tape, closed, tape.constant(x), tape.constant(h)).value(), h) < 1e-12);
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng r(seed);
    GruCell c = make_gru("g", 3, 4, r);
    randomize(c.parameters(), r);
    const Tensor hs = random_tensor({4}, r);
    CHECK(grad_check([&](Tape& t, Var in) { return sum(gru_step(t, c, in, t.constant(hs))); }, random_tensor({3}, r))
              .max_relative_error < 1e-4);
  }
}

TEST_CASE("backbone") {
  BackboneConfig cfg = BackboneConfig::small(1, 12, 3);
  Backbone bb = make_backbone("bb", cfg);
  Rng rng(1);
  {
    Tape tape;
    CHECK(backbone_forward(tape, bb, tape.constant(Tensor({1, 16, 16}))).value() == Tensor({12}));
  }
  Backbone biased = bb;
  for (auto& b : biased.biases) b.value = random_tensor(b.value.shape(), rng);
  {
    // on a zero image the first stage sees only its biases
    Backbone other = biased;
    other.kernels[0].value = random_tensor(other.kernels[0].value.shape(), rng);
    Tape tape;
    const Tensor a = backbone_forward(tape, biased, tape.constant(Tensor({1, 16, 16}))).value();
    const Tensor b = backbone_forward(tape, other, tape.constant(Tensor({1, 16, 16}))).value();
    CHECK(max_abs_diff(a, b) < 1e-12);
  }
  for (std::size_t size : {15, 16, 23, 32}) {
    Tape tape;
    const Tensor out = backbone_forward(tape, bb, tape.constant(random_tensor({1, size, size}, rng))).value();
    CHECK(out.shape() == Tensor::Shape{12});
  }
  Tape tape;
  const Tensor a = backbone_forward(tape, bb, tape.constant(random_tensor({1, 16, 16}, rng))).value();
  const Tensor b = backbone_forward(tape, bb, tape.constant(random_tensor({1, 16, 16}, rng))).value();
  CHECK(max_abs_diff(a, b) > 0.0);

  CHECK(grad_check([&](Tape& t, Var img) { return sum(backbone_forward(t, bb, img)); }, random_tensor({1, 16, 16}, rng))
            .max_relative_error < 1e-4);

  BackboneConfig bad = cfg;
  bad.output_dim = 7;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("tiling arithmetic") {
  CHECK(expected_window_count({224, 64, 32}) == 36);
  CHECK(expected_window_count({224, 32, 32}) == 49);
  CHECK(expected_window_count({32, 16, 8}) == 9);
  for (std::size_t d = 1; d < 40; ++d) CHECK(expected_window_count({40, 40, d}) == 1);
  CHECK_THROWS_AS(expected_window_count({16, 32, 8}), Error);
  CHECK_THROWS_AS(expected_window_count({16, 8, 0}), Error);
}

TEST_CASE("paper-scale tiles") {
  Tensor img({1, 224, 224});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<double>(i);
  const auto windows = tile(img, {224, 64, 32});
  REQUIRE(windows.size() == 36);
  // the last window covers rows and columns [160, 224)
  const Tensor& last = windows.back();
  CHECK(last[0] == img[160 * 224 + 160]);
  CHECK(last[63 * 64 + 63] == img[223 * 224 + 223]);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) CHECK(windows.front()[y * 64 + x] == img[y * 224 + x]);
}

TEST_CASE("tiles are exact sub-slices and coverage matches a loop oracle") {
  Rng rng(17);
  for (int trial = 0; trial < 250; ++trial) {
    const std::size_t h = 8 + rng.below(57);
    const std::size_t w = 1 + rng.below(h);
    const std::size_t d = 1 + rng.below(h);
    const std::size_t c = 1 + rng.below(2);
    const TilingSpec spec{h, w, d};
    const Tensor img = random_tensor({c, h, h}, rng);
    const auto windows = tile(img, spec);
    REQUIRE(windows.size() == expected_window_count(spec));

    std::vector<std::size_t> coverage(h * h, 0), oracle(h * h, 0);
    const std::size_t per_side = spec.per_side();
    for (std::size_t t = 0; t < windows.size(); ++t) {
      const std::size_t r = t / per_side, col = t % per_side;
      CHECK(windows[t].shape() == Tensor::Shape{c, w, w});
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < w; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double v = windows[t][(ch * w + y) * w + x];
            if (v != img[(ch * h + r * d + y) * h + col * d + x]) FAIL("window pixel differs from source");
            if (ch == 0) ++coverage[(r * d + y) * h + col * d + x];
          }
    }
    for (std::size_t y0 = 0; y0 + w <= h; y0 += d)
      for (std::size_t x0 = 0; x0 + w <= h; x0 += d)
        for (std::size_t y = y0; y < y0 + w; ++y)
          for (std::size_t x = x0; x < x0 + w; ++x) ++oracle[y * h + x];
    CHECK(coverage == oracle);
  }
}

TEST_CASE("non-overlapping tiles reconstruct the image") {
  Rng rng(4);
  const Tensor img = random_tensor({2, 24, 24}, rng);
  const auto windows = tile(img, {24, 8, 8});
  Tensor rebuilt({2, 24, 24});
  for (std::size_t t = 0; t < windows.size(); ++t)
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x)
          rebuilt[(ch * 24 + (t / 3) * 8 + y) * 24 + (t % 3) * 8 + x] = windows[t][(ch * 8 + y) * 8 + x];
  CHECK(rebuilt == img);
  CHECK_THROWS_AS(tile(Tensor({1, 8, 6}), {8, 4, 4}), Error);
}

TEST_CASE("higher model") {
  HigherConfig cfg;
  cfg.backbone = BackboneConfig::small(1, 16, 1);
  cfg.hidden = {8, 6, 4};
  cfg.n_classes = 7;
  HigherModel model = make_higher(cfg, 3);
  Rng rng(2);
  const Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
  Tape tape;
  Rng unused(0);
  const Tensor p = higher_forward(tape, model, img, Mode::eval, unused).value();
  CHECK(p.size() == 7);
  CHECK(std::abs(sum_of(p) - 1.0) < 1e-12);
  CHECK(higher_forward(tape, model, img, Mode::eval, unused).value() == p);

  // a constant added to every logit leaves the distribution and the argmax alone
  HigherModel shifted = model;
  for (double& b : shifted.head.back().bias.value.data()) b += 17.5;
  const Tensor q = higher_forward(tape, shifted, img, Mode::eval, unused).value();
  CHECK(max_abs_diff(p, q) < 1e-12);
  CHECK(std::max_element(p.data().begin(), p.data().end()) - p.data().begin() ==
        std::max_element(q.data().begin(), q.data().end()) - q.data().begin());

  Rng a(9), b(9);
  const Tensor first = higher_forward(tape, model, img, Mode::train, a).value();
  CHECK(higher_forward(tape, model, img, Mode::train, b).value() == first);
}

TEST_CASE("window features") {
  ExtractorConfig cfg;
  cfg.backbone = BackboneConfig::small(1, 10, 2);
  cfg.hidden = {8, 5};
  WindowExtractor fx = make_extractor(cfg, 4);
  Rng rng(6);
  const TilingSpec spec{32, 16, 8};
  {
    Tape tape;
    const auto feats = window_features(tape, fx, Tensor({1, 32, 32}, 0.4), spec);
    CHECK(feats.size() == expected_window_count(spec));
    for (const auto& f : feats) CHECK(f.value() == feats.front().value());
  }
  // swapping the quadrants of an image permutes the features of the
  // non-overlapping windows the same way
  const TilingSpec quads{32, 16, 16};
  const Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
  const std::size_t perm[4] = {3, 0, 2, 1};
  Tensor moved({1, 32, 32});
  for (std::size_t t = 0; t < 4; ++t) {
    const std::size_t src = perm[t];
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        moved[((t / 2) * 16 + y) * 32 + (t % 2) * 16 + x] = img[((src / 2) * 16 + y) * 32 + (src % 2) * 16 + x];
  }
  Tape tape;
  const auto a = window_features(tape, fx, img, quads);
  const auto b = window_features(tape, fx, moved, quads);
  for (std::size_t t = 0; t < 4; ++t) CHECK(b[t].value() == a[perm[t]].value());
}

TEST_CASE("encoder") {
  Rng rng(8);
  LowerModel m = make_lower(small_lower(), "l", 5);
  randomize(m.parameters(), rng);
  {
    Tape tape;
    const auto xs = variables(tape, 1, 6, rng);
    const auto a = encode(tape, m, xs);
    REQUIRE(a.size() == 1);
    const Tensor h0({4});
    const Tensor f = gru_oracle(m.encoder_forward, xs[0].value(), h0);
    const Tensor b = gru_oracle(m.encoder_backward, xs[0].value(), h0);
    CHECK(max_abs_diff(a[0].value(), concat(f, b, 0)) < 1e-12);
  }
  {
    LowerModel z = m;
    zero_all(z.parameters());
    Tape tape;
    for (const Var& a : encode(tape, z, variables(tape, 5, 6, rng))) CHECK(a.value() == Tensor({8}));
  }
  {
    LowerModel swapped = m;
    std::swap(swapped.encoder_forward, swapped.encoder_backward);
    Tape tape;
    auto xs = variables(tape, 6, 6, rng);
    const auto a = encode(tape, m, xs);
    std::reverse(xs.begin(), xs.end());
    const auto b = encode(tape, swapped, xs);
    for (std::size_t t = 0; t < 6; ++t) {
      const Tensor& u = a[5 - t].value();
      const Tensor& v = b[t].value();
      for (std::size_t i = 0; i < 4; ++i) {
        CHECK(v[i] == u[i + 4]);
        CHECK(v[i + 4] == u[i]);
      }
    }
  }
  Tape tape;
  CHECK_THROWS_AS(encode(tape, m, std::vector<Var>{}), Error);
}

TEST_CASE("attention") {
  Rng rng(10);
  LowerModel m = make_lower(small_lower(), "l", 5);
  randomize(m.parameters(), rng);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t steps = 1 + rng.below(9);
    Tape tape;
    const auto a = variables(tape, steps, 8, rng);
    Var r = tape.variable(random_tensor({5}, rng));
    const Attention att = attend(tape, m, r, a);

    // explicit energies, softmax and weighted sum
    std::vector<double> e(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      double acc = 0.0;
      for (std::size_t i = 0; i < 3; ++i) {
        double pre = m.attention_bias.value[i];
        for (std::size_t j = 0; j < 5; ++j) pre += m.attention_query.value[i * 5 + j] * r.value()[j];
        for (std::size_t j = 0; j < 8; ++j) pre += m.attention_key.value[i * 8 + j] * a[t].value()[j];
        acc += m.attention_score.value[i] * std::tanh(pre);
      }
      e[t] = acc;
    }
    const double top = *std::max_element(e.begin(), e.end());
    double z = 0.0;
    for (double& v : e) z += (v = std::exp(v - top));
    Tensor context({8});
    for (std::size_t t = 0; t < steps; ++t) {
      CHECK(std::abs(att.alpha.value()[t] - e[t] / z) < 1e-12);
      for (std::size_t j = 0; j < 8; ++j) context[j] += e[t] / z * a[t].value()[j];
    }
    CHECK(max_abs_diff(att.context.value(), context) < 1e-12);
    if (steps == 1) {
      CHECK(att.alpha.value() == Tensor::vector({1.0}));
      CHECK(max_abs_diff(att.context.value(), a[0].value()) < 1e-15);
    }
  }

  LowerModel flat = m;
  flat.attention_score.value = zeros_like(flat.attention_score.value);
  Tape tape;
  const auto a = variables(tape, 7, 8, rng);
  const Attention att = attend(tape, flat, tape.variable(random_tensor({5}, rng)), a);
  Tensor mean({8});
  for (const Var& v : a)
    for (std::size_t j = 0; j < 8; ++j) mean[j] += v.value()[j] / 7.0;
  for (double w : att.alpha.value().data()) CHECK(w == doctest::Approx(1.0 / 7.0).epsilon(1e-14));
  CHECK(max_abs_diff(att.context.value(), mean) < 1e-12);
}

TEST_CASE("decoder") {
  Rng rng(12);
  LowerModel m = make_lower(small_lower(), "l", 5);
  randomize(m.parameters(), rng);
  for (std::size_t steps : {1, 4, 9}) {
    Tape tape;
    DecodeTrace trace;
    const Tensor out = decode(tape, m, variables(tape, steps, 8, rng), &trace).value();
    CHECK(out.size() == 5);
    CHECK(std::abs(sum_of(out) - 1.0) < 1e-12);
    CHECK(trace.steps == steps);
    CHECK(trace.alphas.size() == steps);
    for (const auto& alpha : trace.alphas) CHECK(std::abs(sum_of(alpha) - 1.0) < 1e-12);
  }
  {
    LowerModel z = m;
    zero_all(z.parameters());
    Tape tape;
    CHECK(decode(tape, z, variables(tape, 4, 8, rng)).value() == Tensor({5}, 0.2));
  }
  // constant alignment scores reduce the decoder to a GRU fed the mean annotation
  LowerModel flat = m;
  flat.attention_score.value = zeros_like(flat.attention_score.value);
  Tape tape;
  const auto a = variables(tape, 6, 8, rng);
  const Tensor out = decode(tape, flat, a).value();
  Tensor mean({8});
  for (const Var& v : a)
    for (std::size_t j = 0; j < 8; ++j) mean[j] += v.value()[j] / 6.0;
  Tensor r({5});
  for (int t = 0; t < 6; ++t) r = gru_oracle(flat.decoder, mean, r);
  Tape t2;
  const Tensor expect = dense_forward(t2, flat.head, t2.constant(r)).value();
  CHECK(max_abs_diff(out, expect) < 1e-10);
}

TEST_CASE("lower model end to end") {
  ExtractorConfig fc;
  fc.backbone = BackboneConfig::small(1, 10, 2);
  fc.hidden = {8, 6};
  WindowExtractor fx = make_extractor(fc, 1);
  LowerModel m = make_lower(small_lower(6), "l", 2);
  Rng rng(3);
  const Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
  Tape tape;
  DecodeTrace trace;
  const Tensor p = lower_forward(tape, fx, m, img, {32, 16, 8}, &trace).value();
  CHECK(trace.steps == 9);
  CHECK(lower_forward(tape, fx, m, img, {32, 16, 8}).value() == p);

  DecodeTrace wide;
  Tape t2;
  lower_forward(t2, fx, m, random_tensor({1, 224, 224}, rng, 0, 1), {224, 64, 32}, &wide);
  CHECK(wide.steps == 36);
}

TEST_CASE("model loss") {
  Tape tape;
  CHECK(model_loss(ModelKind::lower, 2, tape.constant(one_hot(2, 5))).value().item() == 0.0);
  CHECK(model_loss(ModelKind::higher, 4, tape.constant(Tensor({23}, 1.0 / 23))).value().item() ==
        doctest::Approx(std::log(23.0)));
  CHECK(model_loss(ModelKind::lower, 0, tape.constant(Tensor({5}, 0.2))).value().item() ==
        doctest::Approx(std::log(5.0)));
  CHECK_THROWS_AS(model_loss(ModelKind::lower, 5, tape.constant(Tensor({5}, 0.2))), Error);
}

TEST_CASE("every parameter receives a gradient") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    HigherConfig hc;
    hc.n_classes = 6;
    HigherModel h = make_higher(hc, seed);
    const Tensor img = random_tensor({1, 32, 32}, rng, 0, 1);
    {
      Tape tape;
      Rng unused(0);
      Var loss = model_loss(ModelKind::higher, rng.below(6), higher_forward(tape, h, img, Mode::eval, unused));
      const Gradients g = tape.backward(loss);
      auto params = h.parameters();
      for (const Tensor& grad : parameter_gradients(tape, g, params)) {
        CHECK(std::any_of(grad.data().begin(), grad.data().end(), [](double v) { return v != 0.0; }));
      }
    }
    WindowExtractor fx = make_extractor({}, seed);
    LowerModel lower = make_lower({}, "l", seed);
    Tape tape;
    Var loss = model_loss(ModelKind::lower, rng.below(5), lower_forward(tape, fx, lower, img, {32, 16, 8}));
    const Gradients g = tape.backward(loss);
    auto params = fx.parameters();
    for (auto* p : lower.parameters()) params.push_back(p);
    for (const Tensor& grad : parameter_gradients(tape, g, params)) {
      CHECK(std::any_of(grad.data().begin(), grad.data().end(), [](double v) { return v != 0.0; }));
    }
  }
}
