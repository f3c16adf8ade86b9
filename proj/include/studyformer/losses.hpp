#pragma once

// Multi-label losses over probabilities. Probabilities are clamped to
// [1e-7, 1 - 1e-7] before the logarithm.

#include <cmath>
#include <string>

#include "studyformer/errors.hpp"
#include "studyformer/tensor.hpp"

namespace studyformer {

inline constexpr double kProbabilityClamp = 1e-7;

enum class LossKind { bce, focal };

inline std::string loss_name(LossKind kind) { return kind == LossKind::bce ? "bce" : "focal"; }

inline LossKind parse_loss(const std::string& name) {
  if (name == "bce") return LossKind::bce;
  if (name == "focal") return LossKind::focal;
  throw ConfigError("loss must be 'bce' or 'focal', got '" + name + "'");
}

// mean of -[y log p + (1 - y) log(1 - p)]
template <class T>
Tensor<T> bce_loss(const Tensor<T>& probabilities, const Tensor<T>& targets) {
  detail::require_same_shape("bce_loss", probabilities, targets);
  const T lo = static_cast<T>(kProbabilityClamp);
  const Tensor<T> p = clamp(probabilities, lo, T(1) - lo);
  const Tensor<T> not_y = add_scalar(scale(targets, T(-1)), T(1));
  const Tensor<T> not_p = add_scalar(scale(p, T(-1)), T(1));
  const Tensor<T> ll = add(mul(targets, log(p)), mul(not_y, log(not_p)));
  return scale(mean(ll), T(-1));
}

// mean of -alpha (1 - p_t)^gamma log p_t, p_t = p for positives, 1 - p otherwise.
template <class T>
Tensor<T> focal_loss(const Tensor<T>& probabilities, const Tensor<T>& targets, T alpha, T gamma) {
  detail::require_same_shape("focal_loss", probabilities, targets);
  if (!(alpha > T(0) && alpha <= T(1))) throw ContractError("focal_loss: alpha must lie in (0, 1]");
  if (!(gamma >= T(0))) throw ContractError("focal_loss: gamma must be >= 0");
  const T lo = static_cast<T>(kProbabilityClamp);
  const Tensor<T> p = clamp(probabilities, lo, T(1) - lo);
  const Tensor<T> not_y = add_scalar(scale(targets, T(-1)), T(1));
  const Tensor<T> not_p = add_scalar(scale(p, T(-1)), T(1));
  const Tensor<T> p_t = add(mul(targets, p), mul(not_y, not_p));
  const Tensor<T> modulator = pow_scalar(add_scalar(scale(p_t, T(-1)), T(1)), gamma);
  return scale(mean(mul(modulator, log(p_t))), -alpha);
}

template <class T>
Tensor<T> multilabel_loss(LossKind kind, const Tensor<T>& probabilities, const Tensor<T>& targets, T alpha,
                          T gamma) {
  return kind == LossKind::bce ? bce_loss(probabilities, targets)
                               : focal_loss(probabilities, targets, alpha, gamma);
}

}  // namespace studyformer
