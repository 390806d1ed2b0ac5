// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference oracles shared by the unit tests and the acceptance binary.
//
// Straight-through gates are not differentiable in the ordinary sense, so they
// are checked against the surrogate
//
//     z(alpha) = hard(alpha0) + soft(alpha) - soft(alpha0)
//
// whose forward value at alpha0 is the hard gate and whose derivative at alpha0
// is exactly the straight-through gradient.  The surrogate is evaluated in plain
// doubles, independently of the tape.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/gated_rank.hpp"
#include "gara/linalg.hpp"
#include "gara/rng.hpp"

namespace gara::testing {

inline double rel_error(double analytic, double numeric, double floor = 1e-4) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = scale * sample_normal(rng);
  return m;
}

inline void fill_normal(ad::Param& p, SeededRng& rng, double scale = 1.0) {
  for (auto& v : p.value.data()) v = scale * sample_normal(rng);
}

/// Makes an MLP output the constant `logits` (zero final weights, final bias = logits).
inline void pin_logits(Mlp& mlp, const std::vector<double>& logits) {
  const std::size_t last = mlp.depth() - 1;
  for (auto& v : mlp.weight(last).value.data()) v = 0.0;
  ad::Param& b = mlp.bias(last);
  for (std::size_t i = 0; i < b.value.size(); ++i) b.value[i] = logits.at(i);
}

inline void pin_logits(Mlp& mlp, double logit) {
  pin_logits(mlp, std::vector<double>(mlp.output_width(), logit));
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
};

/// Compares d(loss)/d(param) from the tape with central differences of `numeric_loss`.
/// `tape_loss` records the loss on a fresh tape; `numeric_loss` evaluates it in
/// plain arithmetic (it may be the same computation run on a tape).
inline GradCheck check_gradients(const std::vector<ad::Param*>& params,
                                 const std::function<ad::Var(ad::Tape&)>& tape_loss,
                                 const std::function<double()>& numeric_loss, double h = 1e-5,
                                 double floor = 1e-4) {
  for (auto* p : params) p->grad = Matrix();
  {
    ad::Tape tape;
    tape.backward(tape_loss(tape));
  }
  GradCheck res;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double analytic = p->grad.empty() ? 0.0 : p->grad[i];
      const double saved = p->value[i];
      p->value[i] = saved + h;
      const double fp = numeric_loss();
      p->value[i] = saved - h;
      const double fm = numeric_loss();
      p->value[i] = saved;
      res.max_rel = std::max(res.max_rel, rel_error(analytic, (fp - fm) / (2.0 * h), floor));
      ++res.checked;
    }
  }
  return res;
}

/// Same computation on a throwaway tape, as a plain scalar.
inline std::function<double()> tape_value(const std::function<ad::Var(ad::Tape&)>& f) {
  return [f] {
    ad::Tape tape(false);
    return f(tape).scalar();
  };
}

inline double st_gate(double alpha, double alpha0, double noise, double tau) {
  const double hard0 = gumbel_sigmoid(alpha0, noise, tau) > kGateThreshold ? 1.0 : 0.0;
  return hard0 + gumbel_sigmoid(alpha, noise, tau) - gumbel_sigmoid(alpha0, noise, tau);
}

/// Gumbel draws in the order GaraAdapter::delta consumes them: space, lower, higher.
struct FrozenNoise {
  double space = 0.0;
  std::vector<double> lower, higher;

  FrozenNoise(SeededRng rng, std::size_t r_lower, std::size_t r_higher) : lower(r_lower), higher(r_higher) {
    space = sample_gumbel(rng);
    for (auto& g : lower) g = sample_gumbel(rng);
    for (auto& g : higher) g = sample_gumbel(rng);
  }
};

struct GateLogits {
  double space = 0.0;
  std::vector<double> lower, higher;
};

inline GateLogits gate_logits(const GaraAdapter& a, const Matrix& f) {
  GateLogits l;
  l.space = a.gates().space_mlp.evaluate(f)[0];
  const Matrix lo = a.gates().lower_mlp.evaluate(f), hi = a.gates().higher_mlp.evaluate(f);
  l.lower.assign(lo.data().begin(), lo.data().end());
  l.higher.assign(hi.data().begin(), hi.data().end());
  return l;
}

/// Train-mode adapter output (T x D) for token rows x, with every gate replaced by
/// its straight-through surrogate around the logits `at`.
inline Matrix surrogate_delta(const GaraAdapter& a, const Matrix& x, const Matrix& f, const FrozenNoise& g,
                              const GateLogits& at) {
  const double tau = a.config().tau;
  const GateLogits now = gate_logits(a, f);
  const double zs = st_gate(now.space, at.space, g.space, tau);
  const std::size_t d = a.config().output_dim;
  Matrix out(x.rows(), d);
  auto add_space = [&](const RankSpace& s, const std::vector<double>& logits, const std::vector<double>& logits0,
                       const std::vector<double>& noise, double space_coeff) {
    for (std::size_t i = 0; i < s.max_rank; ++i) {
      const double c = st_gate(logits[i], logits0[i], noise[i], tau) * space_coeff;
      const auto arow = s.a.value.row(i);
      for (std::size_t t = 0; t < x.rows(); ++t) {
        const double proj = dot(x.row(t), arow) * c;
        for (std::size_t r = 0; r < d; ++r) out(t, r) += proj * s.b.value(r, i);
      }
    }
  };
  add_space(a.lower(), now.lower, at.lower, g.lower, 1.0 - zs);
  add_space(a.higher(), now.higher, at.higher, g.higher, zs);
  return out;
}

/// Scalar head used by layer-level checks: sum(W .* Y) + 0.5 * sum(Y .* Y).
inline double head_loss(const Matrix& y, const Matrix& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i] + 0.5 * y[i] * y[i];
  return s;
}

inline ad::Var head_loss(ad::Tape& tape, const ad::Var& y, const Matrix& w) {
  return ad::add(ad::sum(ad::mul(y, tape.constant(w))), ad::scalar_mul(ad::sum(ad::mul(y, y)), 0.5));
}

}  // namespace gara::testing
