// SPDX-License-Identifier: Apache-2.0
//
// Ablation baselines: fixed-rank LoRA, MoE-LoRA (one expert per input), and a
// single-space gated adapter (component gating without rank-space selection).
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/errors.hpp"
#include "gara/gated_rank.hpp"
#include "gara/linalg.hpp"
#include "gara/mlp.hpp"
#include "gara/rng.hpp"

namespace gara {

class LoraAdapter {
 public:
  LoraAdapter() = default;

  // B (D x R) starts at zero, A (R x K) ~ N(0, 1/K).
  LoraAdapter(std::size_t rank, std::size_t output_dim, std::size_t input_dim, SeededRng& rng,
              const std::string& name = "lora")
      : rank_(rank), b_(name + ".b", Matrix(output_dim, rank)), a_(name + ".a", Matrix(rank, input_dim)) {
    if (rank == 0) throw ConfigError("lora: rank must be >= 1");
    if (rank > std::min(output_dim, input_dim)) {
      throw ConfigError("lora: rank " + std::to_string(rank) + " exceeds min(D,K) = " +
                        std::to_string(std::min(output_dim, input_dim)));
    }
    const double std = 1.0 / std::sqrt(static_cast<double>(input_dim));
    for (auto& v : a_.value.data()) v = sample_normal(rng, 0.0, std);
  }

  std::size_t rank() const noexcept { return rank_; }
  std::size_t input_dim() const { return a_.value.cols(); }
  std::size_t output_dim() const { return b_.value.rows(); }
  ad::Param& b() noexcept { return b_; }
  ad::Param& a() noexcept { return a_; }
  const ad::Param& b() const noexcept { return b_; }
  const ad::Param& a() const noexcept { return a_; }

  Matrix delta_weight() const { return matmul(b_.value, a_.value); }

  // (X A^T) B^T for token rows X (T x K).
  ad::Var delta(ad::Tape& tape, const ad::Var& x) {
    if (x.value().cols() != input_dim()) {
      throw ShapeError("lora: input width " + std::to_string(x.value().cols()) + ", expected " +
                       std::to_string(input_dim()));
    }
    return ad::matmul_nt(ad::matmul_nt(x, tape.leaf(a_)), tape.leaf(b_));
  }

  template <class F>
  void for_each_param(F&& f) {
    f(a_);
    f(b_);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f(a_);
    f(b_);
  }

  std::size_t param_count() const { return a_.value.size() + b_.value.size(); }

 private:
  std::size_t rank_ = 0;
  ad::Param b_;
  ad::Param a_;
};

/// h = W0 x + B (A x).
inline Vector lora_forward(const Matrix& w0, const LoraAdapter& lora, const Vector& x) {
  if (w0.rows() != lora.output_dim() || w0.cols() != lora.input_dim() || x.len() != lora.input_dim()) {
    throw ShapeError("lora_forward: W0 " + w0.shape_str() + ", x length " + std::to_string(x.len()) +
                     ", adapter " + std::to_string(lora.output_dim()) + "x" + std::to_string(lora.input_dim()));
  }
  const Vector ax = matvec(lora.a().value, x);
  return matvec(w0, x) + matvec(lora.b().value, ax);
}

struct MoeConfig {
  std::vector<std::size_t> expert_ranks{1, 2, 8, 16};
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::size_t gate_input_dim = 0;  // 0 means input_dim
  std::size_t gate_hidden = 0;     // 0 means max(1, gate input / 4)
  double tau = 0.5;
};

/// Mixture of fixed-rank LoRA experts; exactly one expert is applied per input.
///
/// Train: one-hot of argmax(softmax((logits + G) / tau)) forward, softmax
/// gradient backward.  Eval: argmax of the router logits, first index on ties.
class MoeLoraAdapter {
 public:
  MoeLoraAdapter() = default;

  MoeLoraAdapter(const MoeConfig& cfg, SeededRng& rng, const std::string& name = "moe") : cfg_(cfg) {
    if (cfg_.expert_ranks.empty()) throw ConfigError("moe: expert list is empty");
    if (!(cfg_.tau > 0.0)) throw ConfigError("moe: tau must be > 0");
    for (std::size_t e = 0; e < cfg_.expert_ranks.size(); ++e) {
      experts_.emplace_back(cfg_.expert_ranks[e], cfg_.output_dim, cfg_.input_dim, rng,
                            name + ".expert" + std::to_string(e));
    }
    const std::size_t fin = cfg_.gate_input_dim ? cfg_.gate_input_dim : cfg_.input_dim;
    const std::size_t h = cfg_.gate_hidden ? cfg_.gate_hidden : std::max<std::size_t>(1, fin / 4);
    router_ = Mlp(name + ".router", {fin, h, cfg_.expert_ranks.size()}, rng, 0.0);
  }

  const MoeConfig& config() const noexcept { return cfg_; }
  std::size_t expert_count() const noexcept { return experts_.size(); }
  LoraAdapter& expert(std::size_t e) { return experts_.at(e); }
  const LoraAdapter& expert(std::size_t e) const { return experts_.at(e); }
  Mlp& router() noexcept { return router_; }
  void set_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("moe: tau must be > 0");
    cfg_.tau = tau;
  }

  static std::size_t argmax(std::span<const double> logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits.size(); ++j)
      if (logits[j] > logits[best]) best = j;
    return best;
  }

  std::size_t eval_choice(const Matrix& f) const { return argmax(router_.evaluate(f).data()); }

  ad::Var delta(ad::Tape& tape, const ad::Var& x, const ad::Var& f, SeededRng& rng, Mode mode,
                std::size_t* chosen = nullptr) {
    if (experts_.empty()) throw ConfigError("moe: expert list is empty");
    if (mode == Mode::Eval) {
      const std::size_t e = eval_choice(f.value());
      if (chosen) *chosen = e;
      return experts_[e].delta(tape, x);
    }
    const ad::Var logits = router_.forward(tape, f);
    Matrix noise(1, logits.cols());
    for (auto& g : noise.data()) g = sample_gumbel(rng);
    const ad::Var soft =
        ad::softmax_rows(ad::scalar_mul(ad::add(logits, tape.constant(std::move(noise))), 1.0 / cfg_.tau));
    const ad::Var onehot = ad::onehot_st(soft);
    if (chosen) *chosen = argmax(onehot.value().data());
    ad::Var total;
    for (std::size_t e = 0; e < experts_.size(); ++e) {
      const ad::Var term = ad::scale_by(experts_[e].delta(tape, x), ad::element(onehot, 0, e));
      total = total.valid() ? ad::add(total, term) : term;
    }
    return total;
  }

  template <class F>
  void for_each_param(F&& f) {
    for (auto& e : experts_) e.for_each_param(f);
    router_.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    for (const auto& e : experts_) e.for_each_param(f);
    router_.for_each_param(f);
  }

  std::size_t param_count() const {
    std::size_t n = router_.param_count();
    for (const auto& e : experts_) n += e.param_count();
    return n;
  }

 private:
  MoeConfig cfg_;
  std::vector<LoraAdapter> experts_;
  Mlp router_;
};

struct MoeForwardResult {
  Vector h;
  std::size_t chosen_expert = 0;
};

inline MoeForwardResult moe_forward(const Matrix& w0, MoeLoraAdapter& moe, const Vector& f, const Vector& x,
                                    SeededRng& rng, Mode mode) {
  if (moe.expert_count() == 0) throw ConfigError("moe: expert list is empty");
  if (w0.cols() != x.len() || w0.rows() != moe.config().output_dim || x.len() != moe.config().input_dim) {
    throw ShapeError("moe_forward: W0 " + w0.shape_str() + " incompatible with x length " + std::to_string(x.len()));
  }
  ad::Tape tape;
  MoeForwardResult res;
  const ad::Var d = moe.delta(tape, tape.constant(x.as_row()), tape.constant(f.as_row()), rng, mode,
                              &res.chosen_expert);
  const Vector base = matvec(w0, x);
  res.h = Vector(base.len());
  for (std::size_t i = 0; i < base.len(); ++i) res.h[i] = base[i] + d.value()[i];
  return res;
}

struct UnifiedGatedConfig {
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::size_t rank = 16;
  double tau = 0.5;
  std::size_t gate_input_dim = 0;
  std::size_t gate_hidden = 0;
  double component_bias = 1.0;
};

/// Component gating over a single set of `rank` components: the gated adapter
/// with rank-space selection removed.
class UnifiedGatedAdapter {
 public:
  UnifiedGatedAdapter() = default;

  UnifiedGatedAdapter(const UnifiedGatedConfig& cfg, SeededRng& rng, const std::string& name = "unified")
      : cfg_(cfg) {
    if (cfg_.rank == 0 || cfg_.rank > std::min(cfg_.input_dim, cfg_.output_dim)) {
      throw ConfigError("unified gated adapter: rank must be in [1, min(D,K)]");
    }
    if (!(cfg_.tau > 0.0)) throw ConfigError("unified gated adapter: tau must be > 0");
    space_ = RankSpace(Space::Lower, cfg_.rank, cfg_.output_dim, cfg_.input_dim, rng, name + ".space");
    const std::size_t fin = cfg_.gate_input_dim ? cfg_.gate_input_dim : cfg_.input_dim;
    const std::size_t h = cfg_.gate_hidden ? cfg_.gate_hidden : std::max<std::size_t>(1, fin / 4);
    gate_ = Mlp(name + ".mlp", {fin, h, h, cfg_.rank}, rng, cfg_.component_bias);
  }

  const UnifiedGatedConfig& config() const noexcept { return cfg_; }
  RankSpace& space() noexcept { return space_; }
  const RankSpace& space() const noexcept { return space_; }
  Mlp& gate() noexcept { return gate_; }
  void set_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("unified gated adapter: tau must be > 0");
    cfg_.tau = tau;
  }

  ad::Var delta(ad::Tape& tape, const ad::Var& x, const ad::Var& f, SeededRng& rng, Mode mode,
                GateDecision* decision = nullptr) {
    const GateOutput z = gumbel_sigmoid_gate(tape, gate_, cfg_.tau, f, rng, mode);
    if (decision) {
      decision->space = Space::Lower;
      decision->z = z.bits;
      decision->effective_rank = popcount(z.bits);
      decision->soft_space = 0.0;
      decision->soft = z.soft;
    }
    return space_.apply(tape, x, z.z);
  }

  template <class F>
  void for_each_param(F&& f) {
    f(space_.a);
    f(space_.b);
    gate_.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    f(space_.a);
    f(space_.b);
    gate_.for_each_param(f);
  }

  std::size_t param_count() const {
    return cfg_.rank * (cfg_.input_dim + cfg_.output_dim) + gate_.param_count();
  }

 private:
  UnifiedGatedConfig cfg_;
  RankSpace space_;
  Mlp gate_;
};

}  // namespace gara
