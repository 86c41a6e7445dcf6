#include <doctest.h>

#include <cmath>
#include <numeric>

#include "visreview/autodiff.hpp"
#include "visreview/error.hpp"
#include "visreview/optim.hpp"
#include "visreview/serialize.hpp"
#include "test_util.hpp"

using namespace vr;
using vrtest::random_tensor;
using vrtest::max_abs_diff;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      out[i * n + j] = s;
    }
  return out;
}

Tensor naive_conv(const Tensor& x, const Tensor& w, std::size_t s) {
  const std::size_t c = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t f = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t oh = (h - kh) / s + 1, ow = (wd - kw) / s + 1;
  Tensor out({f, oh, ow});
  for (std::size_t fi = 0; fi < f; ++fi)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci)
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx)
              acc += x[(ci * h + oy * s + ky) * wd + ox * s + kx] * w[((fi * c + ci) * kh + ky) * kw + kx];
        out[(fi * oh + oy) * ow + ox] = acc;
      }
  return out;
}

Tensor naive_pool(const Tensor& x, std::size_t win, std::size_t s) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = (h - win) / s + 1, ow = (w - win) / s + 1;
  Tensor out({c, oh, ow});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < win; ++ky)
          for (std::size_t kx = 0; kx < win; ++kx) acc += x[(ci * h + oy * s + ky) * w + ox * s + kx];
        out[(ci * oh + oy) * ow + ox] = acc / static_cast<double>(win * win);
      }
  return out;
}

// x * tanh(log(1 + e^x)) in long double
double mish_oracle(double x) {
  const long double lx = x;
  return static_cast<double>(lx * std::tanh(std::log1p(std::exp(lx))));
}

}  // namespace

TEST_CASE("matmul examples") {
  const Tensor b = Tensor::matrix({{3, 4}, {5, 6}});
  CHECK(matmul(Tensor::matrix({{1, 0}, {0, 1}}), b) == b);
  CHECK(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5, 6}, {7, 8}})) ==
        Tensor::matrix({{19, 22}, {43, 50}}));
  Rng rng(3);
  const Tensor z = matmul(Tensor({2, 3}), random_tensor({3, 4}, rng));
  CHECK(z.shape() == Tensor::Shape{2, 4});
  for (double v : z.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), Error);
}

TEST_CASE("matmul, conv2d and avg_pool2d match loop oracles") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(16), k = 1 + rng.below(16), n = 1 + rng.below(16);
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    CHECK(max_abs_diff(matmul(a, b), naive_matmul(a, b)) < 1e-12);

    const std::size_t c = 1 + rng.below(3), h = 4 + rng.below(13), kk = 1 + rng.below(4), s = 1 + rng.below(3);
    const Tensor x = random_tensor({c, h, h}, rng);
    const Tensor w = random_tensor({1 + rng.below(4), c, kk, kk}, rng);
    CHECK(max_abs_diff(conv2d(x, w, static_cast<int>(s)), naive_conv(x, w, s)) < 1e-12);
    CHECK(max_abs_diff(avg_pool2d(x, static_cast<int>(kk), static_cast<int>(s)), naive_pool(x, kk, s)) < 1e-12);
  }
  const Tensor x = random_tensor({1, 8, 8}, rng);
  const Tensor w = random_tensor({2, 1, 3, 3}, rng);
  CHECK(max_abs_diff(conv2d(x, w, 1), naive_conv(x, w, 1)) < 1e-12);
  const Tensor x3 = random_tensor({3, 8, 8}, rng);
  CHECK(max_abs_diff(avg_pool2d(x3, 4, 4), naive_pool(x3, 4, 4)) < 1e-12);
}

TEST_CASE("conv2d and pooling special cases") {
  Rng rng(5);
  const Tensor x = random_tensor({1, 6, 6}, rng);
  CHECK(conv2d(x, Tensor({1, 1, 1, 1}, 1.0), 1) == x);
  const Tensor out = conv2d(Tensor({1, 5, 5}, 2.0), Tensor({1, 1, 3, 3}, 1.0), 1);
  for (double v : out.data()) CHECK(v == doctest::Approx(18.0));
  const Tensor pooled = avg_pool2d(Tensor({2, 6, 6}, 0.37), 3, 2);
  for (double v : pooled.data()) CHECK(v == doctest::Approx(0.37));
  CHECK(avg_pool2d(Tensor({1, 2, 2}, std::vector<double>{1, 2, 3, 4}), 2, 2).item() == 2.5);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 1, 7, 7}), 1), Error);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 1, 3, 3}), 0), Error);
}

TEST_CASE("concat") {
  CHECK(concat(Tensor::vector({1, 2}), Tensor::vector({3}), 0) == Tensor::vector({1, 2, 3}));
  const Tensor x = Tensor::vector({4, 5});
  CHECK(concat(x, Tensor(), 0) == x);
  CHECK(concat(Tensor(), x, 0) == x);

  Tape tape;
  Var a = tape.variable(Tensor::vector({1, 2}));
  Var b = tape.variable(Tensor::vector({3, 4, 5}));
  const Gradients g = backward(sum(concat(a, b, 0)));
  CHECK(g[a] == Tensor::vector({1, 1}));
  CHECK(g[b] == Tensor::vector({1, 1, 1}));
}

TEST_CASE("elementwise activations") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(std::tanh(0.0) == 0.0);
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double x = rng.uniform(-30.0, 30.0);
    CHECK(sigmoid(x) + sigmoid(-x) == doctest::Approx(1.0).epsilon(1e-15));
  }
  const Tensor e = elementwise(Elementwise::relu, Tensor::vector({-1, 0, 2}));
  CHECK(e == Tensor::vector({0, 0, 2}));
  CHECK(parse_elementwise("tanh") == Elementwise::tanh);
  CHECK_THROWS_AS(parse_elementwise("gelu"), Error);
}

TEST_CASE("mish") {
  CHECK(mish(0.0) == 0.0);
  CHECK(mish(1.0) == doctest::Approx(0.86509).epsilon(1e-5));
  CHECK(std::abs(mish(20.0) / 20.0 - 1.0) < 1e-6);
  for (double x = -40.0; x <= 40.0; x += 0.173) {
    CHECK(std::abs(mish(x) - mish_oracle(x)) <= 1e-14 * std::max(1.0, std::abs(x)));
    const double h = 1e-6;
    const double numeric = (mish_oracle(x + h) - mish_oracle(x - h)) / (2 * h);
    CHECK(std::abs(mish_derivative(x) - numeric) < 1e-7);
  }
}

TEST_CASE("softmax") {
  CHECK(softmax(Tensor::vector({0, 0})) == Tensor::vector({0.5, 0.5}));
  const Tensor p = softmax(Tensor::vector({std::log(2.0), 0}));
  CHECK(p[0] == doctest::Approx(2.0 / 3.0));
  CHECK(p[1] == doctest::Approx(1.0 / 3.0));
  const Tensor big = softmax(Tensor::vector({1000, 0}));
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor({1 + rng.below(30)}, rng, -20.0, 20.0);
    const Tensor y = softmax(x);
    CHECK(std::abs(std::accumulate(y.data().begin(), y.data().end(), 0.0) - 1.0) < 1e-12);
    Tensor shifted = x;
    const double c = rng.uniform(-100.0, 100.0);
    for (double& v : shifted.data()) v += c;
    CHECK(max_abs_diff(softmax(shifted), y) < 1e-12);
  }
}

TEST_CASE("cross entropy") {
  CHECK(cross_entropy(Tensor::vector({1, 0}), Tensor::vector({1, 0})) == 0.0);
  CHECK(cross_entropy(Tensor::vector({1, 0}), Tensor::vector({0.5, 0.5})) == doctest::Approx(std::log(2.0)));
  CHECK(cross_entropy(one_hot(1, 5), Tensor({5}, 0.2)) == doctest::Approx(std::log(5.0)));
  for (std::size_t n = 1; n < 30; ++n)
    for (std::size_t i = 0; i < n; ++i) CHECK(cross_entropy(one_hot(i, n), one_hot(i, n)) == 0.0);
  // a confident wrong answer is clamped, not infinite
  CHECK(cross_entropy(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == doctest::Approx(-std::log(kProbabilityFloor)));
  CHECK_THROWS_AS(cross_entropy(Tensor::vector({1, 1}), Tensor::vector({0.5, 0.5})), Error);
  CHECK_THROWS_AS(cross_entropy(Tensor::vector({1, 0, 0}), Tensor::vector({0.5, 0.5})), Error);
}

TEST_CASE("dropout") {
  Rng rng(4);
  const Tensor x = random_tensor({50}, rng);
  CHECK(dropout(x, 0.0, Mode::train, rng) == x);
  CHECK(dropout(x, 0.7, Mode::eval, rng) == x);
  const Tensor ones({100000}, 1.0);
  const Tensor y = dropout(ones, 0.2, Mode::train, rng);
  const double mean = std::accumulate(y.data().begin(), y.data().end(), 0.0) / 1e5;
  CHECK(std::abs(mean - 1.0) < 0.01);
  for (double v : y.data()) CHECK((v == 0.0 || v == doctest::Approx(1.25)));
  CHECK_THROWS_AS(dropout(x, 1.0, Mode::train, rng), Error);
  CHECK_THROWS_AS(dropout(x, -0.1, Mode::train, rng), Error);
}

TEST_CASE("backward basics") {
  Tape tape;
  Var x = tape.variable(Tensor::vector({1, 2}));
  CHECK(backward(sum(x))[x] == Tensor::vector({1, 1}));
  Tape t2;
  Var y = t2.variable(Tensor::vector({1, 2}));
  CHECK(backward(sum(mul(y, y)))[y] == Tensor::vector({2, 4}));
  Tape t3;
  Var v = t3.variable(Tensor::vector({1, 2}));
  CHECK_THROWS_AS(backward(mish(v)), Error);
}

TEST_CASE("backward visits each node once") {
  Tape tape;
  Rng rng(9);
  Var a = tape.variable(random_tensor({4, 3}, rng));
  Var b = tape.variable(random_tensor({3}, rng));
  Var h = mish(matmul(a, b));
  Var loss = sum(add(mul(h, h), softmax(h)));  // h feeds several consumers
  const Gradients g = backward(loss);
  std::size_t ran = 0;
  for (std::size_t id = 0; id < tape.size(); ++id) {
    CHECK(g.visit_counts()[id] <= 1);
    ran += g.visit_counts()[id];
  }
  CHECK(ran == g.visited());
  CHECK(g.visited() >= 6);
}

TEST_CASE("grad_check harness") {
  Rng rng(1);
  const Tensor w = random_tensor({5}, rng);
  const auto linear = [&](Tape& tape, Var x) { return sum(mul(tape.constant(w), x)); };
  CHECK(grad_check(linear, random_tensor({5}, rng)).max_relative_error < 1e-10);
  const auto curved = [](Tape&, Var x) { return sum(mish(x)); };
  CHECK(grad_check(curved, random_tensor({8}, rng, -3.0, 3.0)).max_relative_error < 1e-6);
  CHECK(relative_error(0.0, 0.0) == 0.0);
  CHECK(relative_error(1.0, 1.5) == doctest::Approx(1.0 / 3.0));
  CHECK(relative_error(2e-9, 3e-9) == doctest::Approx(1e-3));

  // a tiny slope on top of an O(1) value sits below what central differences resolve
  const Tensor tiny = random_tensor({6}, rng, -1e-9, 1e-9);
  const auto flat = [&](Tape& tape, Var x) { return add(sum(tape.constant(w)), sum(mul(tape.constant(tiny), x))); };
  CHECK(grad_check(flat, random_tensor({6}, rng)).max_relative_error < 1e-4);
}

TEST_CASE("random composite matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Rng rng(seed);
    const Tensor w = random_tensor({5, 6}, rng);
    const Tensor target = one_hot(rng.below(5), 5);
    const auto f = [&](Tape& tape, Var x) { return cross_entropy(target, softmax(mish(matmul(tape.constant(w), x)))); };
    CHECK(grad_check(f, random_tensor({6}, rng)).max_relative_error < 1e-4);
  }
}

TEST_CASE("adam") {
  Parameter p{"p", Tensor::scalar(1.0)};
  std::vector<Parameter*> params{&p};
  AdamState state(params);
  adam_step(params, std::vector<Tensor>{Tensor::scalar(2.0)}, state);
  CHECK(1.0 - p.value.item() == doctest::Approx(1e-3 * 2.0 / (2.0 + 1e-8)));
  CHECK(state.t == 1);
  adam_step(params, std::vector<Tensor>{Tensor::scalar(0.0)}, state);
  CHECK(state.t == 2);
  CHECK_THROWS_AS(adam_step(params, std::vector<Tensor>{Tensor::vector({1, 2})}, state), Error);
}

TEST_CASE("adam on a quadratic") {
  Parameter p{"theta", Tensor::scalar(1.0)};
  std::vector<Parameter*> params{&p};
  AdamState state(params);
  std::vector<double> path;
  for (int step = 0; step < 100; ++step) {
    adam_step(params, std::vector<Tensor>{Tensor::scalar(2.0 * p.value.item())}, state);
    path.push_back(p.value.item());
  }

  // scalar reference in extended precision
  long double theta = 1, m = 0, v = 0, b1t = 1, b2t = 1;
  for (int step = 0; step < 100; ++step) {
    const long double g = 2 * theta;
    m = 0.9L * m + 0.1L * g;
    v = 0.999L * v + 0.001L * g * g;
    b1t *= 0.9L;
    b2t *= 0.999L;
    theta -= 1e-3L * (m / (1 - b1t)) / (std::sqrt(v / (1 - b2t)) + 1e-8L);
    CHECK(std::abs(path[static_cast<std::size_t>(step)] - static_cast<double>(theta)) < 1e-12);
  }
  for (std::size_t i = 1; i < path.size(); ++i) CHECK(path[i] < path[i - 1]);
  // each step moves by at most about the learning rate
  CHECK(path.back() > 0.9);
  CHECK(path.back() < 0.91);
}

TEST_CASE("zero gradient leaves a fresh parameter unchanged") {
  Parameter p{"p", Tensor::vector({0.5, -2.0})};
  std::vector<Parameter*> params{&p};
  AdamState state(params);
  adam_step(params, std::vector<Tensor>{Tensor({2})}, state);
  CHECK(p.value == Tensor::vector({0.5, -2.0}));
  CHECK(state.t == 1);
}

TEST_CASE("tensor blobs round-trip and reject truncation") {
  Rng rng(12);
  const Tensor t = random_tensor({3, 4, 5}, rng);
  const std::string blob = encode_tensor(t);
  CHECK(decode_tensor(blob) == t);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{10}, blob.size() - 1}) {
    CHECK_THROWS_AS(decode_tensor(std::string_view(blob).substr(0, cut)), Error);
  }
  CHECK(crc32("123456789") == 0xCBF43926u);
}

TEST_CASE("rng streams") {
  Rng a(5, 1), b(5, 1), c(5, 2);
  CHECK(a.next_u64() == b.next_u64());
  CHECK(Rng(5, 1).next_u64() != c.next_u64());
  CHECK(Rng(5).split(3).next_u64() == Rng(5).split(3).next_u64());
  CHECK(Rng(5).split(3).next_u64() != Rng(5).split(4).next_u64());
  Rng r(1);
  double sum = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    sum += u;
  }
  CHECK(sum / 10000 == doctest::Approx(0.5).epsilon(0.02));
}
