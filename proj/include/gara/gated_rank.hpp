// SPDX-License-Identifier: Apache-2.0
//
// Gated-rank adapter.
//
// The update matrix is a sum of rank-1 components b_i a_i^T split into two
// exclusive rank spaces (lower: r_L components, higher: r_H components).  Per
// input, a space gate picks one space and a component gate picks a subset of its
// components:
//
//   dW = (1 - z_space) * sum_i zL_i bL_i aL_i^T  +  z_space * sum_j zH_j bH_j aH_j^T
//
// Gates are Gumbel-Sigmoid relaxations sigma((alpha + G) / tau), hard-thresholded
// at 0.5 in the forward pass with the relaxed value carrying the gradient
// (straight-through).  Evaluation drops the noise: z = [sigma(alpha) > 0.5].
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/errors.hpp"
#include "gara/linalg.hpp"
#include "gara/mlp.hpp"
#include "gara/rng.hpp"

namespace gara {

enum class Mode { Train, Eval };

enum class Space : std::uint8_t { Lower = 0, Higher = 1 };

inline const char* to_string(Space s) { return s == Space::Lower ? "lower" : "higher"; }

inline constexpr double kGateThreshold = 0.5;

inline double logistic(double x) { return ad::detail::sigmoid(x); }

// sigma((logit + noise) / tau).
inline double gumbel_sigmoid(double logit, double noise, double tau) {
  return logistic((logit + noise) / tau);
}

// Deterministic gate used at evaluation time: [sigma(logit) > 0.5], strict.
inline std::uint8_t eval_gate(double logit) { return logistic(logit) > kGateThreshold ? 1 : 0; }

inline std::vector<std::uint8_t> eval_gates(std::span<const double> logits) {
  std::vector<std::uint8_t> z(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) z[i] = eval_gate(logits[i]);
  return z;
}

inline std::size_t popcount(std::span<const std::uint8_t> bits) {
  std::size_t n = 0;
  for (auto b : bits) n += b ? 1 : 0;
  return n;
}

/// Per-input gating record.  `z` is the component vector of the selected space.
struct GateDecision {
  Space space = Space::Lower;
  std::vector<std::uint8_t> z;
  std::size_t effective_rank = 0;
  double soft_space = 0.0;
  std::vector<double> soft;

  bool z_space() const noexcept { return space == Space::Higher; }
  friend bool operator==(const GateDecision&, const GateDecision&) = default;
};

/// Fixed gate values replacing the learned gates (tests, ablations).
struct GateOverride {
  bool z_space = false;
  std::vector<std::uint8_t> z_lower;
  std::vector<std::uint8_t> z_higher;
};

struct GaraConfig {
  std::size_t input_dim = 0;    // K
  std::size_t output_dim = 0;   // D
  std::size_t rank_lower = 2;   // r_L
  std::size_t rank_higher = 16; // r_H
  double tau = 0.5;
  std::size_t gate_input_dim = 0;  // width of f(x); 0 means input_dim
  std::size_t gate_hidden = 0;     // 0 means max(1, gate input / 4)
  double component_bias = 1.0;     // final-layer bias of the component gates

  std::size_t resolved_gate_input() const { return gate_input_dim ? gate_input_dim : input_dim; }
  std::size_t resolved_gate_hidden() const {
    if (gate_hidden) return gate_hidden;
    return std::max<std::size_t>(1, resolved_gate_input() / 4);
  }

  void validate() const {
    if (input_dim == 0 || output_dim == 0) throw ConfigError("gara: input_dim and output_dim must be > 0");
    if (rank_lower == 0) throw ConfigError("gara: rank_lower must be >= 1");
    if (rank_lower >= rank_higher) {
      throw ConfigError("gara: rank_lower (" + std::to_string(rank_lower) + ") must be < rank_higher (" +
                        std::to_string(rank_higher) + ")");
    }
    if (2 * rank_higher > input_dim) {
      throw ConfigError("gara: rank_higher (" + std::to_string(rank_higher) + ") must be <= input_dim/2 (" +
                        std::to_string(input_dim / 2) + ")");
    }
    if (!(tau > 0.0)) throw ConfigError("gara: tau must be > 0");
  }
};

// One set of rank-1 components: column i of `b` is b_i (length D), row i of `a` is a_i (length K).
struct RankSpace {
  Space label = Space::Lower;
  std::size_t max_rank = 0;
  ad::Param b;
  ad::Param a;

  RankSpace() = default;
  RankSpace(Space l, std::size_t rank, std::size_t out_dim, std::size_t in_dim, SeededRng& rng,
            const std::string& prefix)
      : label(l),
        max_rank(rank),
        b(prefix + ".b", Matrix(out_dim, rank)),
        a(prefix + ".a", Matrix(rank, in_dim)) {
    // a ~ N(0, 1/K); b = 0 so the update starts at exactly zero.
    const double std = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (auto& v : a.value.data()) v = sample_normal(rng, 0.0, std);
  }

  Vector b_vector(std::size_t i) const {
    Vector v(b.value.rows());
    for (std::size_t r = 0; r < v.len(); ++r) v[r] = b.value(r, i);
    return v;
  }
  Vector a_vector(std::size_t i) const {
    const auto row = a.value.row(i);
    return Vector(std::vector<double>(row.begin(), row.end()));
  }

  // sum_i z_i b_i a_i^T, as B diag(z) A.
  Matrix compose(std::span<const std::uint8_t> z) const {
    if (z.size() != max_rank) {
      throw ShapeError("compose: gate length " + std::to_string(z.size()) + " != rank " + std::to_string(max_rank));
    }
    const std::size_t d = b.value.rows(), k = a.value.cols();
    Matrix out(d, k);
    for (std::size_t i = 0; i < max_rank; ++i) {
      if (!z[i]) continue;
      for (std::size_t r = 0; r < d; ++r) {
        const double bv = b.value(r, i);
        if (bv == 0.0) continue;
        const auto arow = a.value.row(i);
        for (std::size_t c = 0; c < k; ++c) out(r, c) += bv * arow[c];
      }
    }
    return out;
  }

  // ((X A^T) .* coeff) B^T for token rows X (T x K) and coefficients (1 x r).
  ad::Var apply(ad::Tape& tape, const ad::Var& x, const ad::Var& coeff) {
    return ad::matmul_nt(ad::mul_row(ad::matmul_nt(x, tape.leaf(a)), coeff), tape.leaf(b));
  }
};

struct GatingNetworks {
  Mlp space_mlp;   // f -> hidden -> 1
  Mlp lower_mlp;   // f -> hidden -> hidden -> r_L
  Mlp higher_mlp;  // f -> hidden -> hidden -> r_H
  double tau = 0.5;
};

/// Output of a gate: the hard value as a tape node (straight-through in Train
/// mode, constant in Eval mode) plus the relaxed values kept for telemetry.
struct GateOutput {
  ad::Var z;
  std::vector<std::uint8_t> bits;
  std::vector<double> soft;
};

/// Gumbel-Sigmoid gate over the logits produced by `mlp` from `f`.
///
/// Train: soft = sigma((alpha + G) / tau) with i.i.d. G ~ Gumbel(0,1) per logit,
/// forward value [soft > 0.5], identity backward onto soft.
/// Eval: no noise, no recording through the MLP; z = [sigma(alpha) > 0.5].
inline GateOutput gumbel_sigmoid_gate(ad::Tape& tape, Mlp& mlp, double tau, const ad::Var& f,
                                      SeededRng& rng, Mode mode) {
  if (!(tau > 0.0)) throw ConfigError("gate: tau must be > 0");
  GateOutput out;
  if (mode == Mode::Eval) {
    const Matrix logits = mlp.evaluate(f.value());
    Matrix z(1, logits.cols());
    out.bits.resize(logits.cols());
    out.soft.resize(logits.cols());
    for (std::size_t i = 0; i < logits.cols(); ++i) {
      out.soft[i] = logistic(logits[i]);
      out.bits[i] = eval_gate(logits[i]);
      z[i] = out.bits[i];
    }
    out.z = tape.constant(std::move(z));
    return out;
  }
  const ad::Var logits = mlp.forward(tape, f);
  Matrix noise(1, logits.cols());
  for (auto& g : noise.data()) g = sample_gumbel(rng);
  const ad::Var soft =
      ad::sigmoid(ad::scalar_mul(ad::add(logits, tape.constant(std::move(noise))), 1.0 / tau));
  out.z = ad::hard_threshold_st(soft, kGateThreshold);
  const Matrix& sv = soft.value();
  const Matrix& zv = out.z.value();
  out.soft.assign(sv.data().begin(), sv.data().end());
  out.bits.resize(zv.size());
  for (std::size_t i = 0; i < zv.size(); ++i) out.bits[i] = zv[i] > 0.5 ? 1 : 0;
  return out;
}

/// Gating 1: choose the lower (0) or higher (1) rank space.
inline GateOutput gate_space(ad::Tape& tape, GatingNetworks& gates, const ad::Var& f, SeededRng& rng,
                             Mode mode) {
  return gumbel_sigmoid_gate(tape, gates.space_mlp, gates.tau, f, rng, mode);
}

/// Gating 2: choose the active components within `space`.
inline GateOutput gate_components(ad::Tape& tape, GatingNetworks& gates, const ad::Var& f, Space space,
                                  SeededRng& rng, Mode mode) {
  Mlp& mlp = space == Space::Lower ? gates.lower_mlp : gates.higher_mlp;
  return gumbel_sigmoid_gate(tape, mlp, gates.tau, f, rng, mode);
}

class GaraAdapter {
 public:
  GaraAdapter() = default;

  GaraAdapter(const GaraConfig& cfg, SeededRng& rng, const std::string& name = "gara") : cfg_(cfg) {
    cfg_.validate();
    const std::size_t k = cfg_.input_dim, d = cfg_.output_dim;
    lower_ = RankSpace(Space::Lower, cfg_.rank_lower, d, k, rng, name + ".lower");
    higher_ = RankSpace(Space::Higher, cfg_.rank_higher, d, k, rng, name + ".higher");
    const std::size_t fin = cfg_.resolved_gate_input(), h = cfg_.resolved_gate_hidden();
    gates_.space_mlp = Mlp(name + ".space_mlp", {fin, h, 1}, rng, 0.0);
    gates_.lower_mlp = Mlp(name + ".lower_mlp", {fin, h, h, cfg_.rank_lower}, rng, cfg_.component_bias);
    gates_.higher_mlp = Mlp(name + ".higher_mlp", {fin, h, h, cfg_.rank_higher}, rng, cfg_.component_bias);
    gates_.tau = cfg_.tau;
  }

  const GaraConfig& config() const noexcept { return cfg_; }
  RankSpace& lower() noexcept { return lower_; }
  RankSpace& higher() noexcept { return higher_; }
  const RankSpace& lower() const noexcept { return lower_; }
  const RankSpace& higher() const noexcept { return higher_; }
  GatingNetworks& gates() noexcept { return gates_; }
  const GatingNetworks& gates() const noexcept { return gates_; }
  RankSpace& space(Space s) noexcept { return s == Space::Lower ? lower_ : higher_; }
  const RankSpace& space(Space s) const noexcept { return s == Space::Lower ? lower_ : higher_; }

  void set_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("gara: tau must be > 0");
    cfg_.tau = tau;
    gates_.tau = tau;
  }

  /// Adapter contribution for token rows `x` (T x K): returns (T x D) rows of x dW^T.
  /// `f` is the gate input (1 x gate width).  The unselected space is skipped in
  /// Eval mode and under an override; in Train mode both spaces are recorded so
  /// the space gate receives gradient from both.
  ad::Var delta(ad::Tape& tape, const ad::Var& x, const ad::Var& f, SeededRng& rng, Mode mode,
                GateDecision* decision = nullptr, const GateOverride* override_gates = nullptr) {
    check_input(x.value());
    if (override_gates) return delta_overridden(tape, x, *override_gates, decision);

    const GateOutput zs = gate_space(tape, gates_, f, rng, mode);
    // Both component gates are always drawn so the noise stream layout is fixed.
    const GateOutput zl = gate_components(tape, gates_, f, Space::Lower, rng, mode);
    const GateOutput zh = gate_components(tape, gates_, f, Space::Higher, rng, mode);
    const bool higher = zs.bits[0] != 0;

    if (decision) {
      const GateOutput& sel = higher ? zh : zl;
      decision->space = higher ? Space::Higher : Space::Lower;
      decision->z = sel.bits;
      decision->effective_rank = popcount(sel.bits);
      decision->soft_space = zs.soft[0];
      decision->soft = sel.soft;
    }

    if (mode == Mode::Eval) {
      RankSpace& sel = higher ? higher_ : lower_;
      return sel.apply(tape, x, higher ? zh.z : zl.z);
    }
    const ad::Var coeff_lower = ad::scale_by(zl.z, ad::one_minus(zs.z));
    const ad::Var coeff_higher = ad::scale_by(zh.z, zs.z);
    return ad::add(lower_.apply(tape, x, coeff_lower), higher_.apply(tape, x, coeff_higher));
  }

  template <class F>
  void for_each_param(F&& f) {
    f(lower_.a);
    f(lower_.b);
    f(higher_.a);
    f(higher_.b);
    gates_.space_mlp.for_each_param(f);
    gates_.lower_mlp.for_each_param(f);
    gates_.higher_mlp.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<GaraAdapter*>(this)->for_each_param([&](const ad::Param& p) { f(p); });
  }

  std::size_t rank_param_count() const {
    return (cfg_.rank_lower + cfg_.rank_higher) * (cfg_.output_dim + cfg_.input_dim);
  }
  std::size_t gate_param_count() const {
    return gates_.space_mlp.param_count() + gates_.lower_mlp.param_count() + gates_.higher_mlp.param_count();
  }

 private:
  void check_input(const Matrix& x) const {
    if (x.cols() != cfg_.input_dim) {
      throw ShapeError("gara: input has width " + std::to_string(x.cols()) + ", expected " +
                       std::to_string(cfg_.input_dim));
    }
  }

  ad::Var delta_overridden(ad::Tape& tape, const ad::Var& x, const GateOverride& ov, GateDecision* decision) {
    if (ov.z_lower.size() != cfg_.rank_lower || ov.z_higher.size() != cfg_.rank_higher) {
      throw ShapeError("gara: override gate lengths do not match ranks");
    }
    const auto& bits = ov.z_space ? ov.z_higher : ov.z_lower;
    if (decision) {
      decision->space = ov.z_space ? Space::Higher : Space::Lower;
      decision->z = bits;
      decision->effective_rank = popcount(bits);
      decision->soft_space = ov.z_space ? 1.0 : 0.0;
      decision->soft.assign(bits.begin(), bits.end());
    }
    Matrix coeff(1, bits.size());
    for (std::size_t i = 0; i < bits.size(); ++i) coeff[i] = bits[i] ? 1.0 : 0.0;
    RankSpace& sel = ov.z_space ? higher_ : lower_;
    return sel.apply(tape, x, tape.constant(std::move(coeff)));
  }

  GaraConfig cfg_;
  RankSpace lower_;
  RankSpace higher_;
  GatingNetworks gates_;
};

/// Total learnable parameters: (r_L + r_H)(D + K) plus every gate weight and bias.
inline std::size_t param_count(const GaraAdapter& adapter) {
  return adapter.rank_param_count() + adapter.gate_param_count();
}

/// The update matrix for explicit gate values.
inline Matrix compose_delta(const GaraAdapter& adapter, bool z_space, std::span<const std::uint8_t> z_lower,
                            std::span<const std::uint8_t> z_higher) {
  const auto& cfg = adapter.config();
  if (z_lower.size() != cfg.rank_lower) {
    throw ShapeError("compose_delta: zL has length " + std::to_string(z_lower.size()) + ", expected " +
                     std::to_string(cfg.rank_lower));
  }
  if (z_higher.size() != cfg.rank_higher) {
    throw ShapeError("compose_delta: zH has length " + std::to_string(z_higher.size()) + ", expected " +
                     std::to_string(cfg.rank_higher));
  }
  return z_space ? adapter.higher().compose(z_higher) : adapter.lower().compose(z_lower);
}

struct AdapterForwardResult {
  Vector h;
  GateDecision decision;
};

/// Single-vector forward h = W0 x + dW x with the gates computed from `f`.
inline AdapterForwardResult adapter_forward(const Matrix& w0, GaraAdapter& adapter, const Vector& x,
                                            const Vector& f, SeededRng& rng, Mode mode) {
  const auto& cfg = adapter.config();
  if (w0.rows() != cfg.output_dim || w0.cols() != cfg.input_dim) {
    throw ShapeError("adapter_forward: W0 is " + w0.shape_str() + ", adapter expects " +
                     std::to_string(cfg.output_dim) + "x" + std::to_string(cfg.input_dim));
  }
  if (x.len() != cfg.input_dim) {
    throw ShapeError("adapter_forward: x has length " + std::to_string(x.len()) + ", expected " +
                     std::to_string(cfg.input_dim));
  }
  ad::Tape tape;
  const ad::Var xr = tape.constant(x.as_row());
  const ad::Var fr = tape.constant(f.as_row());
  AdapterForwardResult res;
  const ad::Var d = adapter.delta(tape, xr, fr, rng, mode, &res.decision);
  const Matrix base = matmul_nt(x.as_row(), w0);
  const Matrix& dv = d.value();
  res.h = Vector(cfg.output_dim);
  for (std::size_t i = 0; i < cfg.output_dim; ++i) res.h[i] = base[i] + dv[i];
  return res;
}

}  // namespace gara
