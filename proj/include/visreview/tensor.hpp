#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "visreview/rng.hpp"

namespace vr {

/// Dense row-major array of doubles.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  /// Empty rank-1 tensor of shape [0].
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Value of a single-element tensor.
  double item() const;
  bool all_finite() const;
  std::string shape_string() const;

  Tensor reshaped(Shape shape) const;

  bool operator==(const Tensor& other) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t shape_size(const Tensor::Shape& shape);
std::string shape_string(const Tensor::Shape& shape);

Tensor zeros_like(const Tensor& t);
Tensor ones_like(const Tensor& t);

/// Elementwise activations selectable by name.
enum class Elementwise { sigmoid, tanh, relu };
Elementwise parse_elementwise(const std::string& name);

enum class Mode { train, eval };

// Unrecorded kernels. The tape-recorded overloads in autodiff.hpp share these
// forward implementations.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride);
/// Accumulates conv2d input/kernel gradients for `grad_out`; null targets are skipped.
void conv2d_backward(const Tensor& x, const Tensor& kernels, int stride, const Tensor& grad_out, Tensor* grad_x,
                     Tensor* grad_kernels);
Tensor avg_pool2d(const Tensor& x, int window, int stride);
Tensor global_avg_pool(const Tensor& x);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor elementwise(Elementwise kind, const Tensor& x);
Tensor mish(const Tensor& x);
Tensor softmax(const Tensor& x);
double cross_entropy(const Tensor& target_onehot, const Tensor& predicted);
/// Inverted dropout: survivors are scaled by 1/(1-rate); eval mode is the identity.
Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng);
/// Multiplicative mask used by dropout; all ones in eval mode or at rate 0.
std::vector<double> dropout_mask(std::size_t n, double rate, Mode mode, Rng& rng);

double sigmoid(double x);
double softplus(double x);
double mish(double x);
double mish_derivative(double x);

/// Probability floor applied before the logarithm in cross_entropy.
inline constexpr double kProbabilityFloor = 1e-12;

Tensor one_hot(std::size_t index, std::size_t length);

}  // namespace vr
