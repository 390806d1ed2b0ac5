// SPDX-License-Identifier: Apache-2.0
//
// Pipeline glue: build an adapted model from a frozen backbone, train it on the
// corrupted training pool, score it on the corrupted test grid.
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "gara/baselines.hpp"
#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/gated_rank.hpp"
#include "gara/model.hpp"
#include "gara/rng.hpp"
#include "gara/trainer.hpp"

namespace gara {

enum class AdapterKind : std::uint8_t { None = 0, Gara, Lora, Moe, Unified };

inline std::string_view to_string(AdapterKind k) {
  switch (k) {
    case AdapterKind::None: return "none";
    case AdapterKind::Gara: return "gara";
    case AdapterKind::Lora: return "lora";
    case AdapterKind::Moe: return "moe";
    case AdapterKind::Unified: return "unified";
  }
  return "?";
}

inline AdapterKind parse_adapter_kind(std::string_view s) {
  for (auto k : {AdapterKind::None, AdapterKind::Gara, AdapterKind::Lora, AdapterKind::Moe, AdapterKind::Unified})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown adapter kind '" + std::string(s) + "' (expected none|gara|lora|moe|unified)");
}

struct AdapterSpec {
  AdapterKind kind = AdapterKind::Gara;
  std::size_t rank_lower = 2;    // gara
  std::size_t rank_higher = 16;  // gara
  std::size_t rank = 4;          // lora, unified
  std::vector<std::size_t> experts{1, 2, 8, 16};
  double tau = 0.5;
  double component_bias = 1.0;
};

/// Row label used in score tables: "gara", "moe", "none", the bare rank for
/// LoRA ("4"), "unified<r>" for the single-space gated variant.
inline std::string label(const AdapterSpec& s) {
  switch (s.kind) {
    case AdapterKind::Lora: return std::to_string(s.rank);
    case AdapterKind::Unified: return "unified" + std::to_string(s.rank);
    default: return std::string(to_string(s.kind));
  }
}

inline AdapterVariant make_adapter(const AdapterSpec& s, std::size_t input_dim, std::size_t output_dim,
                                   SeededRng& rng, const std::string& name) {
  switch (s.kind) {
    case AdapterKind::None: return std::monostate{};
    case AdapterKind::Gara: {
      GaraConfig c;
      c.input_dim = input_dim;
      c.output_dim = output_dim;
      c.rank_lower = s.rank_lower;
      c.rank_higher = s.rank_higher;
      c.tau = s.tau;
      c.component_bias = s.component_bias;
      return GaraAdapter(c, rng, name);
    }
    case AdapterKind::Lora: return LoraAdapter(s.rank, output_dim, input_dim, rng, name);
    case AdapterKind::Moe: {
      MoeConfig c;
      c.expert_ranks = s.experts;
      c.input_dim = input_dim;
      c.output_dim = output_dim;
      c.tau = s.tau;
      return MoeLoraAdapter(c, rng, name);
    }
    case AdapterKind::Unified: {
      UnifiedGatedConfig c;
      c.input_dim = input_dim;
      c.output_dim = output_dim;
      c.rank = s.rank;
      c.tau = s.tau;
      c.component_bias = s.component_bias;
      return UnifiedGatedAdapter(c, rng, name);
    }
  }
  throw ConfigError("make_adapter: bad adapter kind");
}

inline constexpr std::uint64_t kAdapterInitStream = 0xADA9;

/// Frozen backbone plus one adapter on every Q/K/V projection.  Slot s is
/// initialised from SeededRng(seed).split(kAdapterInitStream).split(s).
inline Model build_model(ToyBackbone backbone, const AdapterSpec& spec, std::uint64_t seed) {
  backbone.set_trainable(false);
  Model model(std::move(backbone));
  const std::size_t dim = model.backbone().config().dim;
  for (std::size_t i = 0; i < model.slots().size(); ++i) {
    AdapterSlot& slot = model.slots()[i];
    SeededRng rng = SeededRng(seed).split(kAdapterInitStream).split(i);
    const std::string name = "block" + std::to_string(slot.layer) + "." + to_string(slot.proj);
    model.attach(slot.layer, slot.proj, make_adapter(spec, dim, dim, rng, name));
  }
  return model;
}

inline void set_model_tau(Model& model, double tau) {
  for (auto& s : model.slots()) {
    std::visit([&](auto& a) {
      using T = std::decay_t<decltype(a)>;
      if constexpr (!std::is_same_v<T, std::monostate> && !std::is_same_v<T, LoraAdapter>) a.set_tau(tau);
    }, s.adapter);
  }
}

struct RunOutput {
  Model model;
  std::vector<StepRecord> log;
  std::vector<EvalRow> rows;
};

/// One independent run: adapters initialised and trained from `cfg.seed`,
/// then scored in Eval mode on `test`.
inline RunOutput run_experiment(const ToyBackbone& backbone, const Dataset& train_set, const Dataset& test_set,
                                const AdapterSpec& spec, const TrainConfig& cfg, const StepCallback& on_step = {}) {
  RunOutput out;
  out.model = build_model(backbone, spec, cfg.seed);
  set_model_tau(out.model, cfg.tau);
  if (spec.kind != AdapterKind::None) out.log = train(out.model, train_set, cfg, on_step).log;
  out.rows = evaluate(out.model, test_set);
  return out;
}

}  // namespace gara
