#include "visreview/tiler.hpp"

#include <algorithm>

#include "visreview/error.hpp"

namespace vr {

void TilingSpec::validate() const {
  if (image_size == 0 || window == 0) fail(ErrorCode::InvalidConfig, "tiling sizes must be positive");
  if (stride == 0) fail(ErrorCode::NonPositiveStride, "tiling stride must be positive");
  if (window > image_size) {
    fail(ErrorCode::WindowLargerThanImage, "window " + std::to_string(window) + " exceeds image side " +
                                               std::to_string(image_size));
  }
}

std::size_t TilingSpec::per_side() const {
  validate();
  return (image_size - window) / stride + 1;
}

std::size_t expected_window_count(const TilingSpec& spec) {
  const std::size_t side = spec.per_side();
  return side * side;
}

std::vector<Tensor> tile(const Tensor& image, const TilingSpec& spec) {
  if (image.rank() != 3) fail(ErrorCode::DimensionMismatch, "tile expects a C x H x W image");
  if (image.dim(1) != image.dim(2)) fail(ErrorCode::NonSquareImage, "tile expects a square image");
  if (image.dim(1) != spec.image_size) {
    fail(ErrorCode::DimensionMismatch, "image side " + std::to_string(image.dim(1)) + " differs from spec " +
                                           std::to_string(spec.image_size));
  }
  const std::size_t side = spec.per_side();
  const std::size_t channels = image.dim(0), h = spec.image_size, w = spec.window;
  std::vector<Tensor> windows;
  windows.reserve(side * side);
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) {
      Tensor win({channels, w, w});
      for (std::size_t ch = 0; ch < channels; ++ch)
        for (std::size_t y = 0; y < w; ++y) {
          const double* src = image.raw() + (ch * h + r * spec.stride + y) * h + c * spec.stride;
          std::copy_n(src, w, win.raw() + (ch * w + y) * w);
        }
      windows.push_back(std::move(win));
    }
  }
  return windows;
}

}  // namespace vr
