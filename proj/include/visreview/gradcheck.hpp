#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "visreview/autodiff.hpp"

namespace vr {

struct GradCase {
  std::string name;
  std::uint64_t seed = 0;
  GradCheckResult result;
  bool passed = false;
};

struct GradSuiteOptions {
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per parameter tensor in the two full-model cases;
  /// every other case checks all coordinates.
  std::size_t model_coordinates = 64;
};

/// Finite-difference checks of every recorded op, every layer and both full
/// desk-scale models, once per seed.
std::vector<GradCase> run_gradient_suite(const GradSuiteOptions& options,
                                         const std::function<void(const GradCase&)>& on_case = {});

}  // namespace vr
