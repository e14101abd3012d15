#pragma once

// Regression losses on (prediction, target) in grams. Each returns the loss
// value and its derivative w.r.t. the prediction.

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "pointraft/net.hpp"

namespace pointraft {

enum class LossKind { smooth_l1, mse, l1 };

inline LossKind parse_loss(const std::string& s) {
  if (s == "smooth_l1") return LossKind::smooth_l1;
  if (s == "mse") return LossKind::mse;
  if (s == "l1") return LossKind::l1;
  throw std::invalid_argument("unknown loss '" + s +
                              "' (expected smooth_l1, mse, or l1)");
}

inline std::string loss_name(LossKind k) {
  switch (k) {
    case LossKind::smooth_l1: return "smooth_l1";
    case LossKind::mse: return "mse";
    case LossKind::l1: return "l1";
  }
  return "?";
}

// Quadratic within |error| < beta, linear outside; value and slope agree at
// the crossover, so the derivative is continuous.
inline std::pair<double, double> smooth_l1(double pred, double target, double beta) {
  const double e = pred - target;
  if (std::abs(e) < beta) return {0.5 * e * e / beta, e / beta};
  return {std::abs(e) - 0.5 * beta, e > 0 ? 1.0 : -1.0};
}

inline std::pair<double, double> mse(double pred, double target) {
  const double e = pred - target;
  return {e * e, 2.0 * e};
}

inline std::pair<double, double> l1(double pred, double target) {
  const double e = pred - target;
  return {std::abs(e), e > 0 ? 1.0 : (e < 0 ? -1.0 : 0.0)};
}

inline LossFn make_loss(LossKind kind, double beta = 20.0) {
  switch (kind) {
    case LossKind::smooth_l1:
      return [beta](double p, double t) { return smooth_l1(p, t, beta); };
    case LossKind::mse:
      return [](double p, double t) { return mse(p, t); };
    case LossKind::l1:
      return [](double p, double t) { return l1(p, t); };
  }
  throw std::invalid_argument("bad loss kind");
}

}  // namespace pointraft
