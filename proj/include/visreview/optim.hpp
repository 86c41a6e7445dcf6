#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "visreview/autodiff.hpp"

namespace vr {

struct AdamHyper {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First/second moment estimates for one parameter list.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t t = 0;

  AdamState() = default;
  AdamState(std::span<Parameter* const> params, AdamHyper hyper = {});
};

/// Bias-corrected Adam update of every parameter in place; increments t.
void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state);

}  // namespace vr
