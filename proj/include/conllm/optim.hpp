#pragma once

#include "conllm/autograd.hpp"
#include "conllm/errors.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace conllm {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Per-parameter first/second moment buffers plus the shared step counter.
struct AdamState {
  AdamHyper hyper;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

// One bias-corrected Adam step with decoupled weight decay:
//   p <- p - lr*wd*p, then p <- p - lr * m_hat / (sqrt(v_hat) + eps).
// Gradients are read from Parameter::grad. Throws TrainingError if any
// gradient is non-finite; parameters are left untouched in that case.
inline void adam_step(std::span<Parameter* const> params, AdamState& state, double lr,
                      double weight_decay) {
  if (!(lr > 0.0)) throw ParameterError("adam_step: learning rate must be positive");
  if (state.m.empty()) {
    for (const Parameter* p : params) {
      state.m.emplace_back(p->value.shape());
      state.v.emplace_back(p->value.shape());
    }
  }
  if (state.m.size() != params.size())
    throw DimensionError("adam_step: state tracks " + std::to_string(state.m.size()) +
                         " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = *params[i];
    if (p.grad.shape() != p.value.shape() || state.m[i].shape() != p.value.shape())
      throw DimensionError("adam_step: shape mismatch for parameter '" + p.name + "'");
    if (!p.grad.all_finite())
      throw TrainingError("non-finite gradient in parameter '" + p.name + "'");
  }

  ++state.t;
  const auto& h = state.hyper;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g;
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g * g;
      double& w = p.value[k];
      w -= lr * weight_decay * w;
      w -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + h.eps);
    }
  }
}

}  // namespace conllm
