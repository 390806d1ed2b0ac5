// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: a strict `section.field = value` text format.
//
//   # comment                      (also allowed after a value)
//   trainer.learning_rate = 1e-3
//   adapter.kind = gara
//   analysis.ranks = [1, 2, 4, 8, 16]
//
// Values are integers, reals, bare words or lists in brackets.  Unknown keys,
// repeated keys, malformed values and out-of-range values are errors that name
// the line and the field.  Every key is optional; `to_text` prints the fully
// resolved document in a form `parse_config` reads back unchanged.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/experiment.hpp"
#include "gara/model.hpp"
#include "gara/trainer.hpp"

namespace gara {

struct AnalysisConfig {
  std::vector<std::size_t> ranks{1, 2, 4, 8, 16};
  std::vector<double> taus{0.1, 0.5, 1.0, 2.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::size_t parallel = 1;
};

struct ExperimentConfig {
  BackboneConfig backbone;
  PretrainConfig pretrain;
  AdapterSpec adapter;
  BenchConfig bench;
  TrainConfig trainer;
  AnalysisConfig analysis;

  /// Trainer tau follows the adapter tau; image sizes must agree.
  void validate() const {
    backbone.validate();
    bench.validate();
    trainer.validate();
    if (backbone.image_size != bench.image_size) {
      throw ConfigError("backbone.image_size (" + std::to_string(backbone.image_size) + ") != bench.image_size (" +
                        std::to_string(bench.image_size) + ")");
    }
    if (!(adapter.tau > 0.0)) throw ConfigError("adapter.tau must be > 0");
    if (pretrain.batch_size == 0) throw ConfigError("backbone.batch_size must be >= 1");
    if (analysis.parallel == 0) throw ConfigError("analysis.parallel must be >= 1");
  }
};

namespace cfgdetail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

inline std::string real_text(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <class T>
T parse_uint(const std::string& s) {
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

inline int parse_int(const std::string& s) {
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(v)) throw ConfigError("expected a real number, got '" + s + "'");
  return v;
}

inline std::vector<std::string> parse_list(const std::string& s) {
  if (s.size() < 2 || s.front() != '[' || s.back() != ']') throw ConfigError("expected a list like [a, b], got '" + s + "'");
  std::vector<std::string> out;
  const std::string body = trim(std::string_view(s).substr(1, s.size() - 2));
  if (body.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto pos = body.find(',', start);
    const std::string item = trim(std::string_view(body).substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (item.empty()) throw ConfigError("empty list element in '" + s + "'");
    out.push_back(item);
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T, class F>
std::string list_text(const std::vector<T>& xs, F&& fmt) {
  std::string out = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? ", " : "") + fmt(xs[i]);
  return out + "]";
}

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

template <class T>
Field uint_field(std::string key, T& ref) {
  return {std::move(key), [&ref](const std::string& v) { ref = parse_uint<T>(v); },
          [&ref] { return std::to_string(ref); }};
}

inline Field real_field(std::string key, double& ref) {
  return {std::move(key), [&ref](const std::string& v) { ref = parse_double(v); }, [&ref] { return real_text(ref); }};
}

template <class T>
Field uint_list_field(std::string key, std::vector<T>& ref) {
  return {std::move(key),
          [&ref](const std::string& v) {
            std::vector<T> out;
            for (const auto& x : parse_list(v)) out.push_back(parse_uint<T>(x));
            ref = std::move(out);
          },
          [&ref] { return list_text(ref, [](T x) { return std::to_string(x); }); }};
}

inline Field int_list_field(std::string key, std::vector<int>& ref) {
  return {std::move(key),
          [&ref](const std::string& v) {
            std::vector<int> out;
            for (const auto& x : parse_list(v)) out.push_back(parse_int(x));
            ref = std::move(out);
          },
          [&ref] { return list_text(ref, [](int x) { return std::to_string(x); }); }};
}

inline Field real_list_field(std::string key, std::vector<double>& ref) {
  return {std::move(key),
          [&ref](const std::string& v) {
            std::vector<double> out;
            for (const auto& x : parse_list(v)) out.push_back(parse_double(x));
            ref = std::move(out);
          },
          [&ref] { return list_text(ref, real_text); }};
}

inline Field kinds_field(std::string key, std::vector<CorruptionKind>& ref) {
  return {std::move(key),
          [&ref](const std::string& v) {
            std::vector<CorruptionKind> out;
            for (const auto& x : parse_list(v)) out.push_back(parse_corruption_kind(x));
            ref = std::move(out);
          },
          [&ref] { return list_text(ref, [](CorruptionKind k) { return std::string(to_string(k)); }); }};
}

inline std::vector<Field> fields(ExperimentConfig& c) {
  return {
      uint_field("backbone.image_size", c.backbone.image_size),
      uint_field("backbone.patch", c.backbone.patch),
      uint_field("backbone.dim", c.backbone.dim),
      uint_field("backbone.blocks", c.backbone.blocks),
      uint_field("backbone.ff_hidden", c.backbone.ff_hidden),
      uint_field("backbone.seed", c.backbone.seed),
      uint_field("backbone.epochs", c.pretrain.epochs),
      uint_field("backbone.batch_size", c.pretrain.batch_size),
      real_field("backbone.learning_rate", c.pretrain.learning_rate),
      real_field("backbone.min_clean_iou", c.pretrain.min_clean_iou),
      uint_field("backbone.shuffle_seed", c.pretrain.seed),

      {"adapter.kind", [&c](const std::string& v) { c.adapter.kind = parse_adapter_kind(v); },
       [&c] { return std::string(to_string(c.adapter.kind)); }},
      uint_field("adapter.rank_lower", c.adapter.rank_lower),
      uint_field("adapter.rank_higher", c.adapter.rank_higher),
      uint_field("adapter.rank", c.adapter.rank),
      uint_list_field("adapter.experts", c.adapter.experts),
      real_field("adapter.tau", c.adapter.tau),
      real_field("adapter.component_bias", c.adapter.component_bias),

      uint_field("bench.image_size", c.bench.image_size),
      uint_field("bench.seed", c.bench.seed),
      uint_field("bench.clean_train_images", c.bench.clean_train_images),
      uint_field("bench.clean_test_images", c.bench.clean_test_images),
      uint_field("bench.train_images", c.bench.train_images),
      uint_field("bench.test_images", c.bench.test_images),
      kinds_field("bench.train_kinds", c.bench.train_kinds),
      int_list_field("bench.train_severities", c.bench.train_severities),
      kinds_field("bench.test_kinds", c.bench.test_kinds),
      int_list_field("bench.test_severities", c.bench.test_severities),

      real_field("trainer.learning_rate", c.trainer.learning_rate),
      real_field("trainer.weight_decay", c.trainer.weight_decay),
      uint_field("trainer.batch_size", c.trainer.batch_size),
      uint_field("trainer.steps", c.trainer.steps),
      uint_field("trainer.seed", c.trainer.seed),

      uint_list_field("analysis.ranks", c.analysis.ranks),
      real_list_field("analysis.taus", c.analysis.taus),
      uint_list_field("analysis.seeds", c.analysis.seeds),
      uint_field("analysis.parallel", c.analysis.parallel),
  };
}

}  // namespace cfgdetail

/// Defaults of the toy experiment.  The trainer runs at a higher learning rate
/// than TrainConfig's default, which is sized for full-scale backbones.
inline ExperimentConfig default_config() {
  ExperimentConfig c;
  c.trainer.learning_rate = 1e-3;
  c.trainer.steps = 1500;
  return c;
}

inline ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = default_config()) {
  auto table = cfgdetail::fields(base);
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = "config line " + std::to_string(lineno);
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    const auto hash = raw.find('#');
    const std::string line = cfgdetail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'section.field = value', got '" + line + "'");
    const std::string key = cfgdetail::trim(std::string_view(line).substr(0, eq));
    const std::string value = cfgdetail::trim(std::string_view(line).substr(eq + 1));
    auto it = std::find_if(table.begin(), table.end(), [&](const cfgdetail::Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(where + ": unknown field '" + key + "'");
    if (!seen.insert(key).second) throw ConfigError(where + ": field '" + key + "' set twice");
    if (value.empty()) throw ConfigError(where + ": field '" + key + "' has no value");
    try {
      it->set(value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": field '" + key + "': " + e.what());
    }
  }
  base.trainer.tau = base.adapter.tau;
  base.validate();
  return base;
}

inline std::string to_text(const ExperimentConfig& cfg) {
  ExperimentConfig copy = cfg;
  std::string out;
  std::string section;
  for (const auto& f : cfgdetail::fields(copy)) {
    const std::string s = f.key.substr(0, f.key.find('.'));
    if (!section.empty() && s != section) out += '\n';
    section = s;
    out += f.key + " = " + f.get() + '\n';
  }
  return out;
}

}  // namespace gara
