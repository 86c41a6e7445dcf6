#include "visreview/optim.hpp"

#include <cmath>

#include "visreview/error.hpp"

namespace vr {

AdamState::AdamState(std::span<Parameter* const> params, AdamHyper h) : hyper(h) {
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Parameter* p : params) {
    m.push_back(zeros_like(p->value));
    v.push_back(zeros_like(p->value));
  }
}

void adam_step(std::span<Parameter* const> params, std::span<const Tensor> grads, AdamState& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    fail(ErrorCode::ShapeMismatch, "adam_step: parameter, gradient and state counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& shape = params[i]->value.shape();
    if (grads[i].shape() != shape || state.m[i].shape() != shape || state.v[i].shape() != shape) {
      fail(ErrorCode::ShapeMismatch, "adam_step: shape mismatch for parameter '" + params[i]->name + "'");
    }
  }
  ++state.t;
  const auto& h = state.hyper;
  const double t = static_cast<double>(state.t);
  const double correction1 = 1.0 - std::pow(h.beta1, t);
  const double correction2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i]->value.raw();
    double* m = state.m[i].raw();
    double* v = state.v[i].raw();
    const double* g = grads[i].raw();
    for (std::size_t j = 0; j < grads[i].size(); ++j) {
      m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
      v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
      const double m_hat = m[j] / correction1;
      const double v_hat = v[j] / correction2;
      w[j] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
  }
}

}  // namespace vr
