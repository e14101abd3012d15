#pragma once

// Adam over the model's trainable arrays.  Weight decay is decoupled by
// default (applied as a multiplicative shrink of the parameter, not through
// the moment estimates); the coupled variant adds wd * theta to the gradient
// before the moment update.  Moments are kept in double regardless of the
// parameter scalar so the update math is identical for float and double nets.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pointraft/net.hpp"

namespace pointraft {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  bool decoupled = true;
};

template <class S>
class Adam {
 public:
  explicit Adam(const AdamConfig& cfg = {}) : cfg_(cfg) {
    if (!(cfg.beta1 >= 0 && cfg.beta1 < 1) || !(cfg.beta2 >= 0 && cfg.beta2 < 1))
      throw std::invalid_argument("adam betas must lie in [0, 1)");
    if (!(cfg.eps > 0)) throw std::invalid_argument("adam eps must be positive");
    if (cfg.weight_decay < 0) throw std::invalid_argument("weight decay must be nonnegative");
  }

  // one update with the given step size; params and grads must align
  void step(std::vector<ArrayRef<S>> params, std::vector<ArrayRef<S>> grads, double lr) {
    if (params.size() != grads.size())
      throw std::invalid_argument("adam: param/grad array count mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].size(), 0.0);
        v_[i].assign(params[i].size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != grads[i].name || params[i].size() != m_[i].size() ||
          grads[i].size() != m_[i].size())
        throw std::invalid_argument("adam: array mismatch at '" + params[i].name + "'");
      S* th = params[i].data;
      const S* gr = grads[i].data;
      std::vector<double>& m = m_[i];
      std::vector<double>& v = v_[i];
      for (std::size_t j = 0; j < m.size(); ++j) {
        double g = double(gr[j]);
        if (!cfg_.decoupled) g += cfg_.weight_decay * double(th[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
        double theta = double(th[j]);
        if (cfg_.decoupled) theta *= 1.0 - lr * cfg_.weight_decay;
        theta -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        th[j] = S(theta);
      }
    }
  }

  void step(ModelParams<S>& p, ModelGrads<S>& g, double lr) {
    step(param_arrays(p, /*with_buffers=*/false), grad_arrays(g), lr);
  }

  long steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace pointraft
