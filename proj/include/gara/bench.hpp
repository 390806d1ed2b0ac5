// SPDX-License-Identifier: Apache-2.0
//
// Synthetic segmentation benchmark: one bright geometric shape on a textured
// background, five corruption kinds at severities 1..5, and mask metrics.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "gara/errors.hpp"
#include "gara/linalg.hpp"
#include "gara/rng.hpp"

namespace gara {

using Image = Matrix;

struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(std::size_t r, std::size_t c) : rows(r), cols(c), bits(r * c, 0) {}

  std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * cols + c]; }
  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * cols + c]; }
  std::size_t count() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  Matrix as_matrix() const {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < bits.size(); ++i) m[i] = bits[i];
    return m;
  }
  friend bool operator==(const Mask&, const Mask&) = default;
};

// ---- metrics ----

namespace detail {
inline void check_masks(const Mask& a, const Mask& b, const char* op) {
  if (a.rows != b.rows || a.cols != b.cols || a.bits.size() != b.bits.size()) {
    throw ShapeError(std::string(op) + ": mask shapes differ (" + std::to_string(a.rows) + "x" +
                     std::to_string(a.cols) + " vs " + std::to_string(b.rows) + "x" + std::to_string(b.cols) + ")");
  }
}
}  // namespace detail

/// |A n B| / |A u B|; two empty masks score 1.
inline double iou(const Mask& pred, const Mask& gt) {
  detail::check_masks(pred, gt, "iou");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += (pred.bits[i] && gt.bits[i]) ? 1 : 0;
    uni += (pred.bits[i] || gt.bits[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// 2|A n B| / (|A| + |B|); two empty masks score 1.
inline double dice(const Mask& pred, const Mask& gt) {
  detail::check_masks(pred, gt, "dice");
  std::size_t inter = 0, total = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    inter += (pred.bits[i] && gt.bits[i]) ? 1 : 0;
    total += pred.bits[i] + gt.bits[i];
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

// Prediction threshold: logit > 0.
inline Mask threshold_logits(const Matrix& logits) {
  Mask m(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.size(); ++i) m.bits[i] = logits[i] > 0.0 ? 1 : 0;
  return m;
}

// ---- corruptions ----

enum class CorruptionKind : std::uint8_t { GaussianNoise = 0, BoxBlur, Brightness, Contrast, SaltPepper };

inline constexpr std::array<CorruptionKind, 5> kAllCorruptions{
    CorruptionKind::GaussianNoise, CorruptionKind::BoxBlur, CorruptionKind::Brightness,
    CorruptionKind::Contrast, CorruptionKind::SaltPepper};

inline std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::GaussianNoise: return "gaussian_noise";
    case CorruptionKind::BoxBlur: return "box_blur";
    case CorruptionKind::Brightness: return "brightness";
    case CorruptionKind::Contrast: return "contrast";
    case CorruptionKind::SaltPepper: return "salt_pepper";
  }
  throw ConfigError("unknown corruption kind");
}

inline CorruptionKind parse_corruption_kind(std::string_view s) {
  for (auto k : kAllCorruptions)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown corruption kind '" + std::string(s) + "'");
}

inline constexpr int kMinSeverity = 1;
inline constexpr int kMaxSeverity = 5;

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::GaussianNoise;
  int severity = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (severity < kMinSeverity || severity > kMaxSeverity) {
      throw ConfigError("corruption severity " + std::to_string(severity) + " outside [1,5]");
    }
    if (static_cast<std::size_t>(kind) >= kAllCorruptions.size()) throw ConfigError("unknown corruption kind");
  }
  friend bool operator==(const CorruptionSpec&, const CorruptionSpec&) = default;
};

inline void clip_unit(Image& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

inline Image add_gaussian_noise(const Image& in, double sigma, SeededRng& rng) {
  Image out = in;
  if (sigma == 0.0) return out;
  for (auto& v : out.data()) v += sample_normal(rng, 0.0, sigma);
  clip_unit(out);
  return out;
}

// Mean over a (2r+1)^2 window with edge clamping, so constants are fixed points.
inline Image box_blur(const Image& in, int radius) {
  if (radius <= 0) return in;
  const auto rows = static_cast<long>(in.rows()), cols = static_cast<long>(in.cols());
  Image out(in.rows(), in.cols());
  const double norm = 1.0 / static_cast<double>((2 * radius + 1) * (2 * radius + 1));
  for (long r = 0; r < rows; ++r) {
    for (long c = 0; c < cols; ++c) {
      double s = 0.0;
      for (long dr = -radius; dr <= radius; ++dr) {
        const long rr = std::clamp(r + dr, 0L, rows - 1);
        for (long dc = -radius; dc <= radius; ++dc) {
          const long cc = std::clamp(c + dc, 0L, cols - 1);
          s += in(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
        }
      }
      out(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = s * norm;
    }
  }
  return out;
}

inline Image shift_brightness(const Image& in, double delta) {
  Image out = in;
  for (auto& v : out.data()) v += delta;
  clip_unit(out);
  return out;
}

// Pulls pixels toward the image mean by `factor` in [0, 1].
inline Image scale_contrast(const Image& in, double factor) {
  double mean = 0.0;
  for (double v : in.data()) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(1, in.size()));
  Image out = in;
  for (auto& v : out.data()) v = mean + (v - mean) * factor;
  clip_unit(out);
  return out;
}

inline Image salt_pepper(const Image& in, double fraction, SeededRng& rng) {
  Image out = in;
  for (auto& v : out.data()) {
    if (sample_uniform(rng) < fraction) v = sample_uniform(rng) < 0.5 ? 0.0 : 1.0;
  }
  return out;
}

// Severity schedules.
inline double noise_sigma(int s) { return 0.06 * s; }
inline int blur_radius(int s) { return s; }
inline double brightness_shift(int s) { return 0.1 * s; }
inline double contrast_factor(int s) { return 1.0 - 0.18 * s; }
inline double salt_pepper_fraction(int s) { return 0.03 * s; }

inline Image apply_corruption(const CorruptionSpec& spec, const Image& image) {
  spec.validate();
  for (double v : image.data()) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("apply_corruption: pixel outside [0,1]");
  }
  SeededRng rng(spec.seed);
  switch (spec.kind) {
    case CorruptionKind::GaussianNoise: return add_gaussian_noise(image, noise_sigma(spec.severity), rng);
    case CorruptionKind::BoxBlur: return box_blur(image, blur_radius(spec.severity));
    case CorruptionKind::Brightness: return shift_brightness(image, brightness_shift(spec.severity));
    case CorruptionKind::Contrast: return scale_contrast(image, contrast_factor(spec.severity));
    case CorruptionKind::SaltPepper: return salt_pepper(image, salt_pepper_fraction(spec.severity), rng);
  }
  throw ConfigError("unknown corruption kind");
}

// ---- clean toy images ----

enum class ShapeKind : std::uint8_t { Disc = 0, Rectangle, Triangle };

struct ToyImage {
  Image image;
  Mask mask;
  ShapeKind shape = ShapeKind::Disc;
};

namespace detail {
inline double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}
}  // namespace detail

/// One bright shape (disc, rectangle or triangle) on a darker textured background.
inline ToyImage generate_toy_image(SeededRng& rng, std::size_t size = 32) {
  if (size < 8) throw ConfigError("toy image size must be >= 8");
  const double n = static_cast<double>(size);
  ToyImage out;
  out.image = Image(size, size);
  out.mask = Mask(size, size);
  out.shape = static_cast<ShapeKind>(rng.index(3));

  const double bg = sample_range(rng, 0.15, 0.35);
  const double fg = sample_range(rng, 0.62, 0.85);
  const double fx = sample_range(rng, 0.3, 0.9), fy = sample_range(rng, 0.3, 0.9);
  const double px = sample_range(rng, 0.0, 2.0 * std::numbers::pi);
  const double py = sample_range(rng, 0.0, 2.0 * std::numbers::pi);

  const double cx = sample_range(rng, 0.3 * n, 0.7 * n), cy = sample_range(rng, 0.3 * n, 0.7 * n);
  const double radius = sample_range(rng, 0.15 * n, 0.3 * n);
  const double hw = sample_range(rng, 0.12 * n, 0.3 * n), hh = sample_range(rng, 0.12 * n, 0.3 * n);
  std::array<double, 6> tri{};
  for (int v = 0; v < 3; ++v) {
    const double ang = sample_range(rng, 0.0, 2.0 * std::numbers::pi) / 3.0 + v * 2.0 * std::numbers::pi / 3.0;
    const double rad = sample_range(rng, 0.2 * n, 0.35 * n);
    tri[2 * v] = cx + rad * std::cos(ang);
    tri[2 * v + 1] = cy + rad * std::sin(ang);
  }

  for (std::size_t r = 0; r < size; ++r) {
    for (std::size_t c = 0; c < size; ++c) {
      const double x = static_cast<double>(c) + 0.5, y = static_cast<double>(r) + 0.5;
      bool inside = false;
      switch (out.shape) {
        case ShapeKind::Disc: inside = (x - cx) * (x - cx) + (y - cy) * (y - cy) <= radius * radius; break;
        case ShapeKind::Rectangle: inside = std::abs(x - cx) <= hw && std::abs(y - cy) <= hh; break;
        case ShapeKind::Triangle: {
          const double e0 = detail::edge(tri[0], tri[1], tri[2], tri[3], x, y);
          const double e1 = detail::edge(tri[2], tri[3], tri[4], tri[5], x, y);
          const double e2 = detail::edge(tri[4], tri[5], tri[0], tri[1], x, y);
          inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
          break;
        }
      }
      const double texture = 0.06 * std::sin(fx * x + px) * std::sin(fy * y + py);
      const double base = inside ? fg : bg;
      out.image(r, c) = std::clamp(base + texture + sample_normal(rng, 0.0, 0.02), 0.0, 1.0);
      out.mask.at(r, c) = inside ? 1 : 0;
    }
  }
  return out;
}

// ---- datasets ----

struct BenchSample {
  std::size_t id = 0;
  std::size_t image_id = 0;
  Image clean;
  Image corrupted;
  Mask mask;
  CorruptionSpec spec;
  bool is_clean = false;  // corrupted == clean, spec unused
};

using Dataset = std::vector<BenchSample>;

struct BenchConfig {
  std::size_t image_size = 32;
  std::uint64_t seed = 2024;
  std::size_t clean_train_images = 384;
  std::size_t clean_test_images = 64;
  std::size_t train_images = 96;
  std::size_t test_images = 12;
  std::vector<CorruptionKind> train_kinds{CorruptionKind::GaussianNoise, CorruptionKind::BoxBlur,
                                          CorruptionKind::Brightness, CorruptionKind::Contrast};
  std::vector<int> train_severities{1, 2, 3};
  std::vector<CorruptionKind> test_kinds{kAllCorruptions.begin(), kAllCorruptions.end()};
  std::vector<int> test_severities{1, 2, 3, 4, 5};

  void validate() const {
    if (image_size < 8) throw ConfigError("bench.image_size must be >= 8");
    for (int s : train_severities)
      if (s < kMinSeverity || s > kMaxSeverity) throw ConfigError("bench.train_severities outside [1,5]");
    for (int s : test_severities)
      if (s < kMinSeverity || s > kMaxSeverity) throw ConfigError("bench.test_severities outside [1,5]");
    if (train_kinds.empty() || test_kinds.empty()) throw ConfigError("bench: corruption kind lists must be nonempty");
  }
};

// Stream tags separating the image pools.
enum class Pool : std::uint64_t { CleanTrain = 1, CleanTest = 2, CorruptTrain = 3, CorruptTest = 4 };

inline ToyImage pool_image(const BenchConfig& cfg, Pool pool, std::size_t index) {
  SeededRng rng = SeededRng(cfg.seed).split(static_cast<std::uint64_t>(pool)).split(index);
  return generate_toy_image(rng, cfg.image_size);
}

inline std::uint64_t corruption_seed(const BenchConfig& cfg, Pool pool, std::size_t index, CorruptionKind k,
                                     int severity) {
  SeededRng rng = SeededRng(cfg.seed)
                      .split(static_cast<std::uint64_t>(pool) + 100)
                      .split(index)
                      .split(static_cast<std::uint64_t>(k) * 16 + static_cast<std::uint64_t>(severity));
  return rng.next_u64();
}

inline Dataset make_clean_set(const BenchConfig& cfg, Pool pool, std::size_t count) {
  cfg.validate();
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    ToyImage t = pool_image(cfg, pool, i);
    BenchSample s;
    s.id = i;
    s.image_id = i;
    s.clean = t.image;
    s.corrupted = std::move(t.image);
    s.mask = std::move(t.mask);
    s.is_clean = true;
    out.push_back(std::move(s));
  }
  return out;
}

// Every image crossed with every (kind, severity) pair, image-major.
inline Dataset make_corrupted_set(const BenchConfig& cfg, Pool pool, std::size_t images,
                                  const std::vector<CorruptionKind>& kinds, const std::vector<int>& severities) {
  cfg.validate();
  Dataset out;
  out.reserve(images * kinds.size() * severities.size());
  for (std::size_t i = 0; i < images; ++i) {
    const ToyImage t = pool_image(cfg, pool, i);
    for (auto k : kinds) {
      for (int sev : severities) {
        BenchSample s;
        s.id = out.size();
        s.image_id = i;
        s.clean = t.image;
        s.mask = t.mask;
        s.spec = CorruptionSpec{k, sev, corruption_seed(cfg, pool, i, k, sev)};
        s.corrupted = apply_corruption(s.spec, t.image);
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

inline Dataset make_train_set(const BenchConfig& cfg) {
  return make_corrupted_set(cfg, Pool::CorruptTrain, cfg.train_images, cfg.train_kinds, cfg.train_severities);
}

inline Dataset make_test_set(const BenchConfig& cfg) {
  return make_corrupted_set(cfg, Pool::CorruptTest, cfg.test_images, cfg.test_kinds, cfg.test_severities);
}

inline bool is_seen(const BenchConfig& cfg, const CorruptionSpec& spec) {
  const bool kind_seen = std::find(cfg.train_kinds.begin(), cfg.train_kinds.end(), spec.kind) != cfg.train_kinds.end();
  const bool sev_seen = std::find(cfg.train_severities.begin(), cfg.train_severities.end(), spec.severity) !=
                        cfg.train_severities.end();
  return kind_seen && sev_seen;
}

}  // namespace gara
