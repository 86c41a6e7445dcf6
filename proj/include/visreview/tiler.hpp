#pragma once

#include <cstddef>
#include <vector>

#include "visreview/tensor.hpp"

namespace vr {

/// Square sliding-window layout over a square image.
struct TilingSpec {
  std::size_t image_size = 32;
  std::size_t window = 16;
  std::size_t stride = 8;

  void validate() const;
  /// Windows along one side: floor((H - w) / d) + 1.
  std::size_t per_side() const;
};

/// (floor((H - w) / d) + 1)^2
std::size_t expected_window_count(const TilingSpec& spec);

/// Row-major windows from the top-left corner. Window t covers rows
/// [r d, r d + w) and columns [c d, c d + w) with t = r * per_side + c.
/// Pixels past the last full window are not covered.
std::vector<Tensor> tile(const Tensor& image, const TilingSpec& spec);

}  // namespace vr
