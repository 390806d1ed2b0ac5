// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/model.hpp"
#include "gara/optim.hpp"
#include "gara/rng.hpp"

namespace gara {

struct TrainConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  std::size_t batch_size = 8;
  double tau = 0.5;
  std::size_t steps = 500;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate >= 0.0)) throw ConfigError("trainer.learning_rate must be >= 0");
    if (!(weight_decay >= 0.0)) throw ConfigError("trainer.weight_decay must be >= 0");
    if (!(tau > 0.0)) throw ConfigError("trainer.tau must be > 0");
    if (batch_size == 0) throw ConfigError("trainer.batch_size must be >= 1");
  }
};

// Gate statistics of one step (gated slots only).
struct StepTelemetry {
  double mean_rank_lower = 0.0;   // over decisions that chose the lower space
  double mean_rank_higher = 0.0;  // over decisions that chose the higher space
  double frac_higher = 0.0;
  std::size_t decisions = 0;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  StepTelemetry telemetry;
};

inline StepTelemetry summarize(const std::vector<SlotDecision>& decisions) {
  StepTelemetry t;
  std::size_t nl = 0, nh = 0;
  double rl = 0.0, rh = 0.0;
  for (const auto& d : decisions) {
    if (d.decision.z_space()) {
      ++nh;
      rh += static_cast<double>(d.decision.effective_rank);
    } else {
      ++nl;
      rl += static_cast<double>(d.decision.effective_rank);
    }
  }
  t.decisions = nl + nh;
  t.mean_rank_lower = nl ? rl / static_cast<double>(nl) : 0.0;
  t.mean_rank_higher = nh ? rh / static_cast<double>(nh) : 0.0;
  t.frac_higher = t.decisions ? static_cast<double>(nh) / static_cast<double>(t.decisions) : 0.0;
  return t;
}

inline void require_frozen_backbone(const Model& model) {
  bool frozen = true;
  model.backbone().for_each_param([&](const ad::Param& p) { frozen = frozen && !p.trainable; });
  if (!frozen) throw UsageError("train_step: backbone parameters must be frozen");
}

struct GradientResult {
  double loss = 0.0;
  std::vector<SlotDecision> decisions;
};

/// Zeroes adapter gradients, then accumulates d(mean batch loss)/d(adapter params)
/// into Param::grad.  Sample i draws its gate noise from rng.split(i).
inline GradientResult compute_gradients(Model& model, std::span<const BenchSample* const> batch,
                                        const SeededRng& rng, Mode mode = Mode::Train,
                                        const GateOverride* gate_override = nullptr) {
  if (batch.empty()) throw UsageError("train_step: empty batch");
  require_frozen_backbone(model);
  const auto params = model.adapter_params();
  for (auto* p : params) p->zero_grad();
  const std::size_t patch = model.backbone().config().patch;
  const double scale = 1.0 / static_cast<double>(batch.size());
  GradientResult res;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const BenchSample& s = *batch[i];
    ad::Tape tape;
    ForwardTelemetry tele;
    const ad::Var logits =
        forward_tokens(tape, model, patchify(s.corrupted, patch), ForwardOptions{mode, rng.split(i), gate_override}, &tele);
    const ad::Var loss = segmentation_loss(logits, patchify(s.mask.as_matrix(), patch));
    res.loss += loss.scalar() * scale;
    tape.backward(ad::scalar_mul(loss, scale));
    for (auto& d : tele.decisions) res.decisions.push_back(std::move(d));
  }
  return res;
}

/// One optimisation step: mean (BCE + Dice) over the batch, Adam with decoupled
/// weight decay on adapter and gate parameters only.
inline StepRecord train_step(Model& model, std::span<const BenchSample* const> batch, const TrainConfig& cfg,
                             AdamState& state, const SeededRng& rng, std::size_t step = 0) {
  cfg.validate();
  GradientResult g = compute_gradients(model, batch, rng, Mode::Train);
  if (!std::isfinite(g.loss)) throw DivergenceError(step, cfg.learning_rate);
  auto params = model.adapter_params();
  if (!params.empty()) state.step(params, AdamConfig{cfg.learning_rate, cfg.weight_decay});
  return StepRecord{step, g.loss, summarize(g.decisions)};
}

// Stream tags: batch composition and gate noise for step s come from
// SeededRng(seed).split(tag).split(s).
inline constexpr std::uint64_t kBatchStream = 0xBA7C;
inline constexpr std::uint64_t kNoiseStream = 0x6A7E;

inline std::vector<const BenchSample*> draw_batch(const Dataset& data, const TrainConfig& cfg, std::size_t step) {
  SeededRng rng = SeededRng(cfg.seed).split(kBatchStream).split(step);
  std::vector<const BenchSample*> batch(cfg.batch_size);
  for (auto& b : batch) b = &data[rng.index(data.size())];
  return batch;
}

using StepCallback = std::function<void(const StepRecord&)>;

struct TrainResult {
  std::vector<StepRecord> log;
  AdamState state;
};

inline TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg, const StepCallback& on_step = {}) {
  cfg.validate();
  if (data.empty()) throw UsageError("train: dataset is empty");
  TrainResult res;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const auto batch = draw_batch(data, cfg, step);
    const SeededRng noise = SeededRng(cfg.seed).split(kNoiseStream).split(step);
    res.log.push_back(train_step(model, batch, cfg, res.state, noise, step));
    if (on_step) on_step(res.log.back());
  }
  return res;
}

struct EvalRow {
  std::size_t sample_id = 0;
  std::size_t image_id = 0;
  CorruptionSpec spec;
  bool is_clean = false;
  double iou = 0.0;
  double dice = 0.0;
  ForwardTelemetry telemetry;
};

/// Eval-mode scores for every sample; touches neither parameters nor any RNG.
inline std::vector<EvalRow> evaluate(Model& model, const Dataset& data) {
  std::vector<EvalRow> rows;
  rows.reserve(data.size());
  for (const auto& s : data) {
    SegmentOutput out = forward_segment(model, s.corrupted, Mode::Eval, SeededRng(0));
    const Mask pred = threshold_logits(out.logits);
    rows.push_back(EvalRow{s.id, s.image_id, s.spec, s.is_clean, iou(pred, s.mask), dice(pred, s.mask),
                           std::move(out.telemetry)});
  }
  return rows;
}

inline double mean_iou(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.iou;
  return s / static_cast<double>(rows.size());
}

inline double mean_dice(const std::vector<EvalRow>& rows) {
  if (rows.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : rows) s += r.dice;
  return s / static_cast<double>(rows.size());
}

}  // namespace gara
