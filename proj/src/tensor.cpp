#include "visreview/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kernels.hpp"
#include "visreview/error.hpp"

namespace vr {

std::size_t shape_size(const Tensor::Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_string(const Tensor::Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor::Tensor() : shape_{0} {}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    fail(ErrorCode::ShapeMismatch, "shape " + vr::shape_string(shape_) + " does not hold " +
                                       std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorCode::ShapeMismatch, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor(Shape{r, c}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) fail(ErrorCode::IndexOutOfRange, "axis out of range");
  return shape_[axis];
}

double Tensor::item() const {
  if (data_.size() != 1) fail(ErrorCode::NonScalarLoss, "item() on tensor of shape " + shape_string());
  return data_[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const { return vr::shape_string(shape_); }

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    fail(ErrorCode::ShapeMismatch, "cannot reshape " + shape_string() + " to " + vr::shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }
Tensor ones_like(const Tensor& t) { return Tensor(t.shape(), 1.0); }

Elementwise parse_elementwise(const std::string& name) {
  if (name == "sigmoid") return Elementwise::sigmoid;
  if (name == "tanh") return Elementwise::tanh;
  if (name == "relu") return Elementwise::relu;
  fail(ErrorCode::UnknownKind, "unknown elementwise kind '" + name + "'");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || (b.rank() != 1 && b.rank() != 2)) {
    fail(ErrorCode::DimensionMismatch, "matmul expects a matrix times a matrix or vector, got " +
                                           a.shape_string() + " and " + b.shape_string());
  }
  const std::size_t m = a.dim(0), k = a.dim(1);
  if (b.dim(0) != k) {
    fail(ErrorCode::DimensionMismatch, "matmul inner dimensions differ: " + a.shape_string() + " and " +
                                           b.shape_string());
  }
  const std::size_t n = b.rank() == 2 ? b.dim(1) : 1;
  Tensor out(b.rank() == 2 ? Tensor::Shape{m, n} : Tensor::Shape{m});
  const double* pa = a.raw();
  const double* pb = b.raw();
  double* pc = out.raw();
  if (n == 1) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* arow = pa + i * k;
      pc[i] = detail::dot(arow, pb, k);
    }
    return out;
  }
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      if (av == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) fail(ErrorCode::DimensionMismatch, "transpose expects a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
  return out;
}

namespace {

void check_image(const Tensor& x, const char* op) {
  if (x.rank() != 3) {
    fail(ErrorCode::DimensionMismatch, std::string(op) + " expects a C x H x W tensor, got " + x.shape_string());
  }
}

struct ConvGeometry {
  std::size_t c, h, w, f, kh, kw, s, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t positions() const { return oh * ow; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& kernels, int stride) {
  check_image(x, "conv2d");
  if (kernels.rank() != 4) fail(ErrorCode::DimensionMismatch, "conv2d kernels must be F x C x kh x kw");
  if (stride <= 0) fail(ErrorCode::NonPositiveStride, "conv2d stride must be positive");
  ConvGeometry g{};
  g.c = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.f = kernels.dim(0);
  g.kh = kernels.dim(2);
  g.kw = kernels.dim(3);
  g.s = static_cast<std::size_t>(stride);
  if (kernels.dim(1) != g.c) fail(ErrorCode::DimensionMismatch, "conv2d channel count differs");
  if (g.kh > g.h || g.kw > g.w) {
    fail(ErrorCode::KernelLargerThanInput,
         "kernel " + kernels.shape_string() + " larger than input " + x.shape_string());
  }
  g.oh = (g.h - g.kh) / g.s + 1;
  g.ow = (g.w - g.kw) / g.s + 1;
  return g;
}

// rows[(oy, ox), (c, ky, kx)] = x[c, oy*s + ky, ox*s + kx]
std::vector<double> im2row(const Tensor& x, const ConvGeometry& g) {
  std::vector<double> rows(g.positions() * g.patch());
  double* out = rows.data();
  for (std::size_t oy = 0; oy < g.oh; ++oy)
    for (std::size_t ox = 0; ox < g.ow; ++ox)
      for (std::size_t ci = 0; ci < g.c; ++ci)
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
          const double* src = x.raw() + (ci * g.h + oy * g.s + ky) * g.w + ox * g.s;
          for (std::size_t kx = 0; kx < g.kw; ++kx) *out++ = src[kx];
        }
  return rows;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride) {
  const ConvGeometry g = conv_geometry(x, kernels, stride);
  const auto rows = im2row(x, g);
  const std::size_t p = g.patch(), n = g.positions();
  Tensor out({g.f, g.oh, g.ow});
  for (std::size_t fi = 0; fi < g.f; ++fi) {
    const double* krow = kernels.raw() + fi * p;
    for (std::size_t j = 0; j < n; ++j) out[fi * n + j] = detail::dot(krow, rows.data() + j * p, p);
  }
  return out;
}

void conv2d_backward(const Tensor& x, const Tensor& kernels, int stride, const Tensor& grad_out, Tensor* grad_x,
                     Tensor* grad_kernels) {
  const ConvGeometry g = conv_geometry(x, kernels, stride);
  const std::size_t p = g.patch(), n = g.positions();
  if (grad_kernels) {
    const auto rows = im2row(x, g);
    for (std::size_t fi = 0; fi < g.f; ++fi) {
      double* dk = grad_kernels->raw() + fi * p;
      for (std::size_t j = 0; j < n; ++j) detail::axpy(grad_out[fi * n + j], rows.data() + j * p, dk, p);
    }
  }
  if (grad_x) {
    std::vector<double> drows(n * p, 0.0);
    for (std::size_t fi = 0; fi < g.f; ++fi) {
      const double* krow = kernels.raw() + fi * p;
      for (std::size_t j = 0; j < n; ++j) detail::axpy(grad_out[fi * n + j], krow, drows.data() + j * p, p);
    }
    const double* in = drows.data();
    for (std::size_t oy = 0; oy < g.oh; ++oy)
      for (std::size_t ox = 0; ox < g.ow; ++ox)
        for (std::size_t ci = 0; ci < g.c; ++ci)
          for (std::size_t ky = 0; ky < g.kh; ++ky) {
            double* dst = grad_x->raw() + (ci * g.h + oy * g.s + ky) * g.w + ox * g.s;
            for (std::size_t kx = 0; kx < g.kw; ++kx) dst[kx] += *in++;
          }
  }
}

Tensor avg_pool2d(const Tensor& x, int window, int stride) {
  check_image(x, "avg_pool2d");
  if (window <= 0 || stride <= 0) fail(ErrorCode::NonPositiveStride, "pool window and stride must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto win = static_cast<std::size_t>(window);
  const auto s = static_cast<std::size_t>(stride);
  if (win > h || win > w) fail(ErrorCode::KernelLargerThanInput, "pool window larger than input");
  const std::size_t oh = (h - win) / s + 1, ow = (w - win) / s + 1;
  const double scale = 1.0 / static_cast<double>(win * win);
  Tensor out({c, oh, ow});
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ky = 0; ky < win; ++ky)
          for (std::size_t kx = 0; kx < win; ++kx) acc += x[(ci * h + oy * s + ky) * w + ox * s + kx];
        out[(ci * oh + oy) * ow + ox] = acc * scale;
      }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  check_image(x, "global_avg_pool");
  const std::size_t c = x.dim(0), plane = x.dim(1) * x.dim(2);
  if (plane == 0) fail(ErrorCode::EmptyInput, "global_avg_pool over an empty plane");
  Tensor out({c});
  for (std::size_t ci = 0; ci < c; ++ci) {
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += x[ci * plane + i];
    out[ci] = acc / static_cast<double>(plane);
  }
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  if (b.empty() && b.rank() == 1) return a;
  if (a.empty() && a.rank() == 1) return b;
  if (a.rank() != b.rank() || axis >= a.rank()) {
    fail(ErrorCode::ShapeMismatch, "concat of " + a.shape_string() + " and " + b.shape_string());
  }
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != axis && a.dim(i) != b.dim(i)) {
      fail(ErrorCode::ShapeMismatch, "concat of " + a.shape_string() + " and " + b.shape_string());
    }
  }
  Tensor::Shape shape = a.shape();
  shape[axis] = a.dim(axis) + b.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= a.dim(i);
  for (std::size_t i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const std::size_t ablock = a.dim(axis) * inner, bblock = b.dim(axis) * inner;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.raw() + o * ablock, ablock, out.raw() + o * (ablock + bblock));
    std::copy_n(b.raw() + o * bblock, bblock, out.raw() + o * (ablock + bblock) + ablock);
  }
  return out;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) {
  if (x > 30.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

// With n = e^x and w = n (n + 2), tanh(softplus(x)) = w / (w + 2), which
// needs a single exponential.
double mish(double x) {
  if (x > 40.0) return x;
  const double n = std::exp(x);
  const double w = n * (n + 2.0);
  return x * w / (w + 2.0);
}

double mish_derivative(double x) {
  if (x > 40.0) return 1.0;
  const double n = std::exp(x);
  const double w = n * (n + 2.0);
  const double d = w + 2.0;
  // tanh(sp) + x sech^2(sp) sigmoid(x), sech^2(sp) = 4 (w + 1) / d^2
  return w / d + x * 4.0 * (w + 1.0) / (d * d) * (n / (1.0 + n));
}

Tensor elementwise(Elementwise kind, const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) {
    switch (kind) {
      case Elementwise::sigmoid: v = sigmoid(v); break;
      case Elementwise::tanh: v = std::tanh(v); break;
      case Elementwise::relu: v = v > 0.0 ? v : 0.0; break;
    }
  }
  return out;
}

Tensor mish(const Tensor& x) {
  Tensor out = x;
  for (auto& v : out.data()) v = mish(v);
  return out;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() != 1) fail(ErrorCode::DimensionMismatch, "softmax expects a vector");
  if (x.empty()) fail(ErrorCode::EmptyInput, "softmax of an empty vector");
  const double peak = *std::max_element(x.data().begin(), x.data().end());
  Tensor out = x;
  double total = 0.0;
  for (auto& v : out.data()) {
    v = std::exp(v - peak);
    total += v;
  }
  for (auto& v : out.data()) v /= total;
  return out;
}

double cross_entropy(const Tensor& target, const Tensor& predicted) {
  if (target.shape() != predicted.shape()) {
    fail(ErrorCode::ShapeMismatch, "cross_entropy target " + target.shape_string() + " vs prediction " +
                                       predicted.shape_string());
  }
  std::size_t ones = 0;
  for (double t : target.data()) {
    if (t == 1.0) {
      ++ones;
    } else if (t != 0.0) {
      fail(ErrorCode::NotOneHot, "target has a value other than 0 or 1");
    }
  }
  if (ones != 1) fail(ErrorCode::NotOneHot, "target must contain exactly one 1");
  double loss = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 1.0) loss -= std::log(std::clamp(predicted[i], kProbabilityFloor, 1.0));
  }
  return loss;
}

std::vector<double> dropout_mask(std::size_t n, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorCode::InvalidRate, "dropout rate must lie in [0, 1)");
  std::vector<double> mask(n, 1.0);
  if (mode == Mode::eval || rate == 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
  return mask;
}

Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  const auto mask = dropout_mask(x.size(), rate, mode, rng);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return out;
}

Tensor one_hot(std::size_t index, std::size_t length) {
  if (index >= length) fail(ErrorCode::IndexOutOfRange, "one_hot index out of range");
  Tensor out({length});
  out[index] = 1.0;
  return out;
}

}  // namespace vr
