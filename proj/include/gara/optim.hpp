// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/errors.hpp"
#include "gara/linalg.hpp"

namespace gara {

struct AdamConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Moments are bound to the parameter list by position.
class AdamState {
 public:
  AdamState() = default;

  std::size_t step_count() const noexcept { return step_; }
  const std::vector<Matrix>& first_moments() const noexcept { return m_; }
  const std::vector<Matrix>& second_moments() const noexcept { return v_; }

  void step(const std::vector<ad::Param*>& params, const AdamConfig& cfg) {
    if (m_.empty()) {
      for (const auto* p : params) {
        m_.emplace_back(p->value.rows(), p->value.cols());
        v_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    if (m_.size() != params.size()) throw UsageError("adam: parameter list changed between steps");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      ad::Param& p = *params[i];
      if (!m_[i].same_shape(p.value)) throw ShapeError("adam: moment shape does not match " + p.name);
      if (p.grad.empty()) p.zero_grad();
      Matrix& m = m_[i];
      Matrix& v = v_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad[j];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        p.value[j] -= cfg.learning_rate * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p.value[j]);
      }
    }
  }

 private:
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  std::size_t step_ = 0;
};

}  // namespace gara
