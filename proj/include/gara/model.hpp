// SPDX-License-Identifier: Apache-2.0
//
// Toy segmentation backbone with adapter slots on every Q/K/V projection.
//
// Image -> 8x8 patches -> tokens (T x dim) -> L blocks -> per-pixel logits.
// Each block:
//   Q, K, V = X Wq^T, X Wk^T, X Wv^T        (each may carry an adapter)
//   X1 = X + (sigmoid(Q K^T / sqrt(dim)) V) / T
//   X2 = X1 + relu(X1 W1^T + b1) W2^T + b2
// Adapters gate on f(x) = mean over tokens of the block input.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "gara/autograd.hpp"
#include "gara/baselines.hpp"
#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/gated_rank.hpp"
#include "gara/linalg.hpp"
#include "gara/optim.hpp"
#include "gara/rng.hpp"

namespace gara {

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t blocks = 2;
  std::size_t ff_hidden = 64;
  std::uint64_t seed = 7;

  std::size_t grid() const { return image_size / patch; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_pixels() const { return patch * patch; }

  void validate() const {
    if (patch == 0 || image_size % patch != 0) throw ConfigError("backbone.patch must divide backbone.image_size");
    if (dim == 0 || blocks == 0 || ff_hidden == 0) throw ConfigError("backbone dims must be > 0");
  }
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class Proj : std::uint8_t { Q = 0, K = 1, V = 2 };

inline const char* to_string(Proj p) {
  switch (p) {
    case Proj::Q: return "q";
    case Proj::K: return "k";
    case Proj::V: return "v";
  }
  return "?";
}

struct Block {
  ad::Param wq, wk, wv;
  ad::Param w1, b1, w2, b2;
};

class ToyBackbone {
 public:
  ToyBackbone() = default;

  explicit ToyBackbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    SeededRng rng = SeededRng(cfg_.seed).split(0xB0);
    const std::size_t d = cfg_.dim, pp = cfg_.patch_pixels(), h = cfg_.ff_hidden;
    auto normal = [&](const std::string& name, std::size_t r, std::size_t c, double std) {
      Matrix m(r, c);
      for (auto& v : m.data()) v = sample_normal(rng, 0.0, std);
      return ad::Param(name, std::move(m));
    };
    const auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    embed_w_ = normal("embed.w", d, pp, fan(pp));
    embed_b_ = ad::Param("embed.b", Matrix(1, d));
    for (std::size_t l = 0; l < cfg_.blocks; ++l) {
      const std::string p = "block" + std::to_string(l);
      Block b;
      b.wq = normal(p + ".wq", d, d, fan(d));
      b.wk = normal(p + ".wk", d, d, fan(d));
      b.wv = normal(p + ".wv", d, d, fan(d));
      b.w1 = normal(p + ".w1", h, d, fan(d));
      b.b1 = ad::Param(p + ".b1", Matrix(1, h));
      b.w2 = normal(p + ".w2", d, h, 0.5 * fan(h));
      b.b2 = ad::Param(p + ".b2", Matrix(1, d));
      blocks_.push_back(std::move(b));
    }
    head_w_ = normal("head.w", pp, d, fan(d));
    head_b_ = ad::Param("head.b", Matrix(1, pp));
  }

  const BackboneConfig& config() const noexcept { return cfg_; }
  Block& block(std::size_t l) { return blocks_.at(l); }
  const Block& block(std::size_t l) const { return blocks_.at(l); }
  ad::Param& embed_w() noexcept { return embed_w_; }
  ad::Param& embed_b() noexcept { return embed_b_; }
  ad::Param& head_w() noexcept { return head_w_; }
  ad::Param& head_b() noexcept { return head_b_; }

  ad::Param& projection(std::size_t layer, Proj p) {
    Block& b = blocks_.at(layer);
    return p == Proj::Q ? b.wq : p == Proj::K ? b.wk : b.wv;
  }

  template <class F>
  void for_each_param(F&& f) {
    f(embed_w_);
    f(embed_b_);
    for (auto& b : blocks_) {
      f(b.wq); f(b.wk); f(b.wv);
      f(b.w1); f(b.b1); f(b.w2); f(b.b2);
    }
    f(head_w_);
    f(head_b_);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<ToyBackbone*>(this)->for_each_param([&](const ad::Param& p) { f(p); });
  }

  void set_trainable(bool trainable) {
    for_each_param([trainable](ad::Param& p) { p.trainable = trainable; });
  }

  std::size_t param_count() const {
    std::size_t n = 0;
    for_each_param([&](const ad::Param& p) { n += p.value.size(); });
    return n;
  }

 private:
  BackboneConfig cfg_;
  ad::Param embed_w_, embed_b_;
  std::vector<Block> blocks_;
  ad::Param head_w_, head_b_;
};

// Image (S x S) -> tokens (T x patch^2), patches row-major, pixels row-major within a patch.
inline Matrix patchify(const Matrix& image, std::size_t patch) {
  if (patch == 0 || image.rows() % patch || image.cols() % patch) {
    throw ShapeError("patchify: image " + image.shape_str() + " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gr = image.rows() / patch, gc = image.cols() / patch;
  Matrix out(gr * gc, patch * patch);
  for (std::size_t r = 0; r < image.rows(); ++r)
    for (std::size_t c = 0; c < image.cols(); ++c)
      out((r / patch) * gc + c / patch, (r % patch) * patch + c % patch) = image(r, c);
  return out;
}

inline Matrix unpatchify(const Matrix& tokens, std::size_t patch, std::size_t size) {
  if (tokens.cols() != patch * patch || tokens.rows() * patch * patch != size * size) {
    throw ShapeError("unpatchify: tokens " + tokens.shape_str() + " do not tile a " + std::to_string(size) + "^2 image");
  }
  const std::size_t gc = size / patch;
  Matrix out(size, size);
  for (std::size_t r = 0; r < size; ++r)
    for (std::size_t c = 0; c < size; ++c)
      out(r, c) = tokens((r / patch) * gc + c / patch, (r % patch) * patch + c % patch);
  return out;
}

using AdapterVariant = std::variant<std::monostate, GaraAdapter, LoraAdapter, MoeLoraAdapter, UnifiedGatedAdapter>;

struct AdapterSlot {
  std::size_t layer = 0;
  Proj proj = Proj::Q;
  AdapterVariant adapter;

  bool empty() const noexcept { return std::holds_alternative<std::monostate>(adapter); }
};

template <class F>
void for_each_adapter_param(AdapterVariant& a, F&& f) {
  std::visit([&](auto& ad) {
    if constexpr (!std::is_same_v<std::decay_t<decltype(ad)>, std::monostate>) ad.for_each_param(f);
  }, a);
}
template <class F>
void for_each_adapter_param(const AdapterVariant& a, F&& f) {
  std::visit([&](const auto& ad) {
    if constexpr (!std::is_same_v<std::decay_t<decltype(ad)>, std::monostate>) ad.for_each_param(f);
  }, a);
}

inline std::size_t adapter_param_count(const AdapterVariant& a) {
  std::size_t n = 0;
  for_each_adapter_param(a, [&](const ad::Param& p) { n += p.value.size(); });
  return n;
}

struct SlotDecision {
  std::size_t slot = 0;
  GateDecision decision;
  friend bool operator==(const SlotDecision&, const SlotDecision&) = default;
};

struct ForwardTelemetry {
  std::vector<SlotDecision> decisions;                           // gated slots, in slot order
  std::vector<std::pair<std::size_t, std::size_t>> moe_choices;  // (slot, expert)
};

class Model {
 public:
  Model() = default;
  explicit Model(ToyBackbone backbone) : backbone_(std::move(backbone)) {
    const std::size_t layers = backbone_.config().blocks;
    for (std::size_t l = 0; l < layers; ++l)
      for (Proj p : {Proj::Q, Proj::K, Proj::V}) slots_.push_back(AdapterSlot{l, p, std::monostate{}});
  }

  ToyBackbone& backbone() noexcept { return backbone_; }
  const ToyBackbone& backbone() const noexcept { return backbone_; }
  std::vector<AdapterSlot>& slots() noexcept { return slots_; }
  const std::vector<AdapterSlot>& slots() const noexcept { return slots_; }

  static std::size_t slot_index(std::size_t layer, Proj p) { return layer * 3 + static_cast<std::size_t>(p); }
  AdapterSlot& slot(std::size_t layer, Proj p) { return slots_.at(slot_index(layer, p)); }

  // At most one adapter per slot.
  void attach(std::size_t layer, Proj p, AdapterVariant adapter) {
    AdapterSlot& s = slot(layer, p);
    if (!s.empty()) {
      throw UsageError("attach: slot layer " + std::to_string(layer) + " proj " + to_string(p) + " is occupied");
    }
    s.adapter = std::move(adapter);
  }

  void detach_all() {
    for (auto& s : slots_) s.adapter = std::monostate{};
  }

  // Adapter parameters in slot order; these are the only parameters trained during robustification.
  std::vector<ad::Param*> adapter_params() {
    std::vector<ad::Param*> out;
    for (auto& s : slots_) for_each_adapter_param(s.adapter, [&](ad::Param& p) { out.push_back(&p); });
    return out;
  }

  std::size_t adapter_param_total() const {
    std::size_t n = 0;
    for (const auto& s : slots_) n += adapter_param_count(s.adapter);
    return n;
  }

 private:
  ToyBackbone backbone_;
  std::vector<AdapterSlot> slots_;
};

struct ForwardOptions {
  Mode mode = Mode::Eval;
  SeededRng rng{0};                              // per-sample stream; slot s uses rng.split(s)
  const GateOverride* gate_override = nullptr;   // applied to every GaRA slot
};

/// Records the forward pass of one image (as patch tokens) and returns logits (T x patch^2).
inline ad::Var forward_tokens(ad::Tape& tape, Model& model, const Matrix& patches, const ForwardOptions& opt,
                              ForwardTelemetry* telemetry = nullptr) {
  ToyBackbone& bb = model.backbone();
  const BackboneConfig& cfg = bb.config();
  if (patches.rows() != cfg.tokens() || patches.cols() != cfg.patch_pixels()) {
    throw ShapeError("forward: expected patches " + std::to_string(cfg.tokens()) + "x" +
                     std::to_string(cfg.patch_pixels()) + ", got " + patches.shape_str());
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  const double inv_t = 1.0 / static_cast<double>(cfg.tokens());

  ad::Var x = ad::add_row(ad::matmul_nt(tape.constant(patches), tape.leaf(bb.embed_w())), tape.leaf(bb.embed_b()));
  for (std::size_t l = 0; l < cfg.blocks; ++l) {
    Block& blk = bb.block(l);
    const ad::Var f = ad::mean_pool(x);
    std::array<ad::Var, 3> proj;
    for (Proj p : {Proj::Q, Proj::K, Proj::V}) {
      const std::size_t si = Model::slot_index(l, p);
      ad::Var out = ad::matmul_nt(x, tape.leaf(bb.projection(l, p)));
      AdapterSlot& slot = model.slots()[si];
      SeededRng rng = opt.rng.split(si);
      std::visit([&](auto& adapter) {
        using T = std::decay_t<decltype(adapter)>;
        if constexpr (std::is_same_v<T, GaraAdapter>) {
          GateDecision d;
          out = ad::add(out, adapter.delta(tape, x, f, rng, opt.mode, &d, opt.gate_override));
          if (telemetry) telemetry->decisions.push_back({si, std::move(d)});
        } else if constexpr (std::is_same_v<T, UnifiedGatedAdapter>) {
          GateDecision d;
          out = ad::add(out, adapter.delta(tape, x, f, rng, opt.mode, &d));
          if (telemetry) telemetry->decisions.push_back({si, std::move(d)});
        } else if constexpr (std::is_same_v<T, LoraAdapter>) {
          out = ad::add(out, adapter.delta(tape, x));
        } else if constexpr (std::is_same_v<T, MoeLoraAdapter>) {
          std::size_t e = 0;
          out = ad::add(out, adapter.delta(tape, x, f, rng, opt.mode, &e));
          if (telemetry) telemetry->moe_choices.emplace_back(si, e);
        }
      }, slot.adapter);
      proj[static_cast<std::size_t>(p)] = out;
    }
    const ad::Var scores = ad::sigmoid(ad::scalar_mul(ad::matmul_nt(proj[0], proj[1]), inv_sqrt_d));
    const ad::Var x1 = ad::add(x, ad::scalar_mul(ad::matmul(scores, proj[2]), inv_t));
    const ad::Var hidden = ad::relu(ad::add_row(ad::matmul_nt(x1, tape.leaf(blk.w1)), tape.leaf(blk.b1)));
    x = ad::add(x1, ad::add_row(ad::matmul_nt(hidden, tape.leaf(blk.w2)), tape.leaf(blk.b2)));
  }
  return ad::add_row(ad::matmul_nt(x, tape.leaf(bb.head_w())), tape.leaf(bb.head_b()));
}

struct SegmentOutput {
  Matrix logits;  // image_size x image_size
  ForwardTelemetry telemetry;
};

/// Per-pixel logits for one image.  No gradients are recorded.
inline SegmentOutput forward_segment(Model& model, const Image& image, Mode mode, const SeededRng& rng,
                                     const GateOverride* gate_override = nullptr) {
  const BackboneConfig& cfg = model.backbone().config();
  if (image.rows() != cfg.image_size || image.cols() != cfg.image_size) {
    throw ShapeError("forward_segment: image " + image.shape_str() + ", expected " +
                     std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  ad::Tape tape(false);
  SegmentOutput out;
  const ad::Var logits = forward_tokens(tape, model, patchify(image, cfg.patch),
                                        ForwardOptions{mode, rng, gate_override}, &out.telemetry);
  out.logits = unpatchify(logits.value(), cfg.patch, cfg.image_size);
  return out;
}

/// Mean BCE + soft Dice on logits (T x patch^2) against the patchified mask.
inline ad::Var segmentation_loss(const ad::Var& logits, const Matrix& target) {
  return ad::add(ad::bce_loss(logits, target), ad::dice_loss(ad::sigmoid(logits), target));
}

// ---- pretraining ----

struct PretrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 8;
  double learning_rate = 3e-3;
  double min_clean_iou = 0.90;
  std::uint64_t seed = 7;
};

struct PretrainResult {
  ToyBackbone backbone;
  double clean_iou = 0.0;
  std::vector<double> loss_curve;  // mean loss per epoch
  bool warning = false;            // set when no training happened
};

class PretrainError : public std::runtime_error {
 public:
  PretrainError(double iou, double required, std::vector<double> curve)
      : std::runtime_error(message(iou, required, curve)), iou_(iou), loss_curve_(std::move(curve)) {}
  double clean_iou() const noexcept { return iou_; }
  const std::vector<double>& loss_curve() const noexcept { return loss_curve_; }

 private:
  static std::string message(double iou, double required, const std::vector<double>& curve) {
    std::string s = "pretraining reached clean IoU " + std::to_string(iou) + " < required " +
                    std::to_string(required) + "; loss per epoch:";
    for (double v : curve) s += " " + std::to_string(v);
    return s;
  }
  double iou_;
  std::vector<double> loss_curve_;
};

inline double mean_iou(Model& model, const Dataset& data) {
  if (data.empty()) return 0.0;
  double s = 0.0;
  for (const auto& smp : data) {
    const auto out = forward_segment(model, smp.corrupted, Mode::Eval, SeededRng(0));
    s += iou(threshold_logits(out.logits), smp.mask);
  }
  return s / static_cast<double>(data.size());
}

/// Trains every backbone weight on clean images, then freezes them.
inline PretrainResult pretrain_backbone(const Dataset& train, const Dataset& holdout, const BackboneConfig& bcfg,
                                        const PretrainConfig& pcfg) {
  if (train.empty()) throw UsageError("pretrain_backbone: clean dataset is empty");
  if (pcfg.batch_size == 0) throw ConfigError("pretrain batch_size must be >= 1");
  Model model{ToyBackbone(bcfg)};
  ToyBackbone& bb = model.backbone();
  bb.set_trainable(true);
  std::vector<ad::Param*> params;
  bb.for_each_param([&](ad::Param& p) { params.push_back(&p); });
  AdamState adam;
  const AdamConfig acfg{pcfg.learning_rate, 0.0};
  PretrainResult res;
  SeededRng order_rng = SeededRng(pcfg.seed).split(0x9E7A);
  std::vector<std::size_t> order(train.size());
  for (std::size_t e = 0; e < pcfg.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.index(i)]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += pcfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + pcfg.batch_size);
      for (auto* p : params) p->zero_grad();
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const BenchSample& s = train[order[i]];
        ad::Tape tape;
        const ad::Var logits = forward_tokens(tape, model, patchify(s.corrupted, bcfg.patch), ForwardOptions{});
        const ad::Var loss = segmentation_loss(logits, patchify(s.mask.as_matrix(), bcfg.patch));
        epoch_loss += loss.scalar();
        tape.backward(ad::scalar_mul(loss, scale));
      }
      adam.step(params, acfg);
    }
    res.loss_curve.push_back(epoch_loss / static_cast<double>(train.size()));
  }
  bb.set_trainable(false);
  for (auto* p : params) p->grad = Matrix();
  res.clean_iou = mean_iou(model, holdout.empty() ? train : holdout);
  if (pcfg.epochs == 0) {
    res.warning = true;
  } else if (res.clean_iou < pcfg.min_clean_iou) {
    throw PretrainError(res.clean_iou, pcfg.min_clean_iou, res.loss_curve);
  }
  res.backbone = std::move(model.backbone());
  return res;
}

}  // namespace gara
