#pragma once

// Adam with per-parameter moments and step counts, keyed by parameter name so
// that the state survives checkpointing independently of parameter order.

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "studyformer/tensor.hpp"

namespace studyformer {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
struct AdamMoments {
  std::uint64_t step = 0;
  std::vector<T> m, v;

  bool operator==(const AdamMoments&) const = default;
};

template <class T>
struct AdamState {
  AdamConfig config;
  std::map<std::string, AdamMoments<T>> moments;
};

// One update of every parameter that requires and holds a gradient, followed
// by zeroing that gradient. Frozen parameters are left untouched.
template <class T>
void adam_step(AdamState<T>& state, const std::vector<std::pair<std::string, Tensor<T>*>>& params, double lr) {
  const auto& cfg = state.config;
  for (const auto& [name, tensor] : params) {
    if (!tensor->requires_grad() || !tensor->has_grad()) continue;
    auto& mom = state.moments[name];
    const std::size_t n = tensor->size();
    if (mom.m.size() != n) {
      mom.m.assign(n, T(0));
      mom.v.assign(n, T(0));
      mom.step = 0;
    }
    ++mom.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(mom.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(mom.step));
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    const T step_size = static_cast<T>(lr / c1);
    const T inv_sqrt_c2 = static_cast<T>(1.0 / std::sqrt(c2));
    const T eps = static_cast<T>(cfg.eps);
    auto values = tensor->mutable_data();
    auto grad = tensor->mutable_grad();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * grad[i];
      mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * grad[i] * grad[i];
      values[i] -= step_size * mom.m[i] / (std::sqrt(mom.v[i]) * inv_sqrt_c2 + eps);
      grad[i] = T(0);
    }
  }
}

}  // namespace studyformer
