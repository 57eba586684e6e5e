#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dermfuse/tensor.hpp"

namespace dermfuse {

// Plain SGD with a step-decay schedule: lr(e) = base_lr * gamma^floor(e / step_size).
struct OptimizerState {
  double base_lr = 0.01;
  int step_size = 15;
  double gamma = 0.1;
  int current_epoch = 0;

  void validate() const {
    if (base_lr < 0.0) throw ConfigError("optimizer: base_lr must be nonnegative");
    if (step_size < 1) throw ConfigError("optimizer: step_size must be a positive epoch count");
    if (gamma <= 0.0 || gamma >= 1.0) throw ConfigError("optimizer: gamma must lie in (0,1)");
    if (current_epoch < 0) throw ConfigError("optimizer: current_epoch must be >= 0");
  }
};

inline double lr_at_epoch(const OptimizerState& state, int epoch) {
  state.validate();
  if (epoch < 0) throw ContractError("lr_at_epoch: epoch must be >= 0");
  return state.base_lr * std::pow(state.gamma, static_cast<double>(epoch / state.step_size));
}

// p <- p - lr * grad(p), then zeroes the grads.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, const OptimizerState& state) {
  const double lr = lr_at_epoch(state, state.current_epoch);
  for (auto& p : params) {
    if (!p.has_grad()) throw StateError("sgd_step: parameter has no populated gradient");
  }
  for (auto& p : params) {
    auto& v = p.values();
    auto& g = p.grad();
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = static_cast<T>(static_cast<double>(v[i]) - lr * static_cast<double>(g[i]));
    }
    detail::ensure_finite(v, "sgd_step");
    p.zero_grad();
  }
}

template <typename T>
void sgd_step(std::vector<Tensor<T>>& params, const OptimizerState& state) {
  sgd_step(std::span<Tensor<T>>(params), state);
}

}  // namespace dermfuse
