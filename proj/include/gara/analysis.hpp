// SPDX-License-Identifier: Apache-2.0
//
// Rank-impact analysis: score tables, oracle rank selectors, rank and
// temperature sweeps, gate telemetry summaries.
#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <tuple>
#include <vector>

#include "gara/bench.hpp"
#include "gara/errors.hpp"
#include "gara/experiment.hpp"
#include "gara/gated_rank.hpp"
#include "gara/trainer.hpp"

namespace gara {

/// Correctly rounded sum (Shewchuk partials).  Order-independent, so equal
/// multisets of scores always compare equal.
inline double exact_sum(std::span<const double> xs) {
  std::vector<double> partials;
  for (double x : xs) {
    std::size_t i = 0;
    for (double y : partials) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials[i++] = lo;
      x = hi;
    }
    partials.resize(i);
    partials.push_back(x);
  }
  std::size_t n = partials.size();
  if (n == 0) return 0.0;
  double hi = partials[--n];
  double lo = 0.0;
  while (n > 0) {
    const double x = hi;
    const double y = partials[--n];
    hi = x + y;
    lo = y - (hi - x);
    if (lo != 0.0) break;
  }
  if (n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0))) {
    const double y = lo * 2.0;
    const double x = hi + y;
    if (y == x - hi) hi = x;
  }
  return hi;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_real(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

// ---- score tables ----

struct ScoreRow {
  std::size_t image_id = 0;
  std::string corruption;  // corruption kind name, "clean" for uncorrupted samples
  int severity = 0;
  std::string rank_or_model;
  double iou = 0.0;
  double dice = 0.0;
  friend bool operator==(const ScoreRow&, const ScoreRow&) = default;
};

enum class Metric : std::uint8_t { IoU, Dice };

inline double metric_of(const ScoreRow& r, Metric m) { return m == Metric::IoU ? r.iou : r.dice; }

/// Numeric labels order by value and come first; other labels order lexically.
inline bool model_less(const std::string& a, const std::string& b) {
  auto num = [](const std::string& s) -> std::optional<unsigned long long> {
    unsigned long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
    return v;
  };
  const auto na = num(a), nb = num(b);
  if (na && nb) return *na < *nb;
  if (na != nb && (na || nb)) return na.has_value();
  return a < b;
}

struct ModelLess {
  bool operator()(const std::string& a, const std::string& b) const { return model_less(a, b); }
};

inline constexpr std::string_view kScoreHeader = "image_id,corruption,severity,rank_or_model,iou,dice";

class ScoreTable {
 public:
  void add(ScoreRow row) { rows_.push_back(std::move(row)); }

  void append(const std::vector<EvalRow>& rows, const std::string& model) {
    for (const auto& r : rows) {
      rows_.push_back(ScoreRow{r.image_id, r.is_clean ? "clean" : std::string(to_string(r.spec.kind)),
                               r.is_clean ? 0 : r.spec.severity, model, r.iou, r.dice});
    }
  }
  void append(const ScoreTable& other) { rows_.insert(rows_.end(), other.rows_.begin(), other.rows_.end()); }

  const std::vector<ScoreRow>& rows() const noexcept { return rows_; }
  std::size_t size() const noexcept { return rows_.size(); }
  bool empty() const noexcept { return rows_.empty(); }

  std::vector<std::string> models() const {
    std::set<std::string, ModelLess> s;
    for (const auto& r : rows_) s.insert(r.rank_or_model);
    return {s.begin(), s.end()};
  }

  double mean(const std::string& model, Metric m = Metric::IoU) const {
    std::vector<double> xs;
    for (const auto& r : rows_)
      if (r.rank_or_model == model) xs.push_back(metric_of(r, m));
    if (xs.empty()) throw DataError("score table has no rows for '" + model + "'");
    return exact_sum(xs) / static_cast<double>(xs.size());
  }

  std::string to_csv() const {
    std::string out(kScoreHeader);
    out += '\n';
    for (const auto& r : rows_) {
      out += std::to_string(r.image_id) + ',' + r.corruption + ',' + std::to_string(r.severity) + ',' +
             r.rank_or_model + ',' + format_real(r.iou) + ',' + format_real(r.dice) + '\n';
    }
    return out;
  }

  static ScoreTable from_csv(std::string_view text) {
    ScoreTable t;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    if (!std::getline(in, line) || strip_cr(line) != kScoreHeader) {
      throw DataError("score table: expected header '" + std::string(kScoreHeader) + "'");
    }
    ++lineno;
    while (std::getline(in, line)) {
      ++lineno;
      line = strip_cr(line);
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::size_t start = 0;
      for (std::size_t pos; (pos = line.find(',', start)) != std::string::npos; start = pos + 1)
        f.push_back(line.substr(start, pos - start));
      f.push_back(line.substr(start));
      const std::string where = "score table line " + std::to_string(lineno);
      if (f.size() != 6) throw DataError(where + ": expected 6 fields, got " + std::to_string(f.size()));
      ScoreRow r;
      r.image_id = parse<std::size_t>(f[0], where + " image_id");
      r.corruption = f[1];
      r.severity = parse<int>(f[2], where + " severity");
      r.rank_or_model = f[3];
      r.iou = parse_real(f[4], where + " iou");
      r.dice = parse_real(f[5], where + " dice");
      t.add(std::move(r));
    }
    return t;
  }

  friend bool operator==(const ScoreTable&, const ScoreTable&) = default;

 private:
  static std::string strip_cr(std::string s) {
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
  }
  template <class T>
  static T parse(const std::string& s, const std::string& where) {
    T v{};
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw DataError(where + ": bad integer '" + s + "'");
    return v;
  }
  static double parse_real(const std::string& s, const std::string& where) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw DataError(where + ": bad number '" + s + "'");
      return v;
    } catch (const std::logic_error&) {
      throw DataError(where + ": bad number '" + s + "'");
    }
  }

  std::vector<ScoreRow> rows_;
};

// ---- oracle selection ----

/// One corrupted input: (image, corruption kind, severity).
using InstanceKey = std::tuple<std::string, int, std::size_t>;

/// Dense view of a complete table: corruption -> instances -> per-model score.
struct ScoreGrid {
  std::vector<std::string> models;  // ModelLess order
  std::map<std::string, std::map<std::pair<int, std::size_t>, std::vector<double>>> cells;
  std::size_t instances = 0;
};

inline ScoreGrid make_grid(const ScoreTable& table, Metric metric = Metric::IoU) {
  if (table.empty()) throw DataError("score table is empty");
  ScoreGrid g;
  g.models = table.models();
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < g.models.size(); ++i) col[g.models[i]] = i;
  const double unset = -1.0;
  for (const auto& r : table.rows()) {
    const double v = metric_of(r, metric);
    if (!(v >= 0.0 && v <= 1.0)) {
      throw DataError("score table: score " + format_real(v) + " outside [0,1] for image " + std::to_string(r.image_id));
    }
    auto& cell = g.cells[r.corruption][{r.severity, r.image_id}];
    if (cell.empty()) cell.assign(g.models.size(), unset);
    double& slot = cell[col[r.rank_or_model]];
    if (slot != unset) {
      throw DataError("score table: duplicate cell image " + std::to_string(r.image_id) + " " + r.corruption + "/" +
                      std::to_string(r.severity) + " model " + r.rank_or_model);
    }
    slot = v;
  }
  for (const auto& [kind, inst] : g.cells) {
    for (const auto& [key, scores] : inst) {
      for (std::size_t m = 0; m < scores.size(); ++m) {
        if (scores[m] == unset) {
          throw DataError("score table: incomplete grid, missing image " + std::to_string(key.second) + " " + kind +
                          "/" + std::to_string(key.first) + " for model " + g.models[m]);
        }
      }
      ++g.instances;
    }
  }
  return g;
}

struct FixedChoice {
  std::string model;
  double mean = 0.0;
};

/// Best single model over the whole table; ties go to the smaller rank.
inline FixedChoice best_fixed(const ScoreTable& table, Metric metric = Metric::IoU) {
  const ScoreGrid g = make_grid(table, metric);
  FixedChoice best;
  double best_sum = -1.0;
  for (std::size_t m = 0; m < g.models.size(); ++m) {
    std::vector<double> xs;
    for (const auto& [kind, inst] : g.cells)
      for (const auto& [key, scores] : inst) xs.push_back(scores[m]);
    const double s = exact_sum(xs);
    if (s > best_sum) {
      best_sum = s;
      best.model = g.models[m];
    }
  }
  best.mean = best_sum / static_cast<double>(g.instances);
  return best;
}

struct OracleCorrupt {
  std::vector<std::pair<std::string, std::string>> choice;  // (corruption, model), corruption-sorted
  double aggregate = 0.0;                                   // pooled mean over all instances
  bool choice_varies() const {
    for (const auto& c : choice)
      if (c.second != choice.front().second) return true;
    return false;
  }
};

inline OracleCorrupt oracle_corrupt(const ScoreTable& table, Metric metric = Metric::IoU) {
  const ScoreGrid g = make_grid(table, metric);
  OracleCorrupt out;
  std::vector<double> chosen;
  for (const auto& [kind, inst] : g.cells) {
    std::size_t best = 0;
    double best_sum = -1.0;
    for (std::size_t m = 0; m < g.models.size(); ++m) {
      std::vector<double> xs;
      for (const auto& [key, scores] : inst) xs.push_back(scores[m]);
      const double s = exact_sum(xs);
      if (s > best_sum) {
        best_sum = s;
        best = m;
      }
    }
    out.choice.emplace_back(kind, g.models[best]);
    for (const auto& [key, scores] : inst) chosen.push_back(scores[best]);
  }
  out.aggregate = exact_sum(chosen) / static_cast<double>(g.instances);
  return out;
}

inline double oracle_instance(const ScoreTable& table, Metric metric = Metric::IoU) {
  const ScoreGrid g = make_grid(table, metric);
  std::vector<double> maxima;
  for (const auto& [kind, inst] : g.cells)
    for (const auto& [key, scores] : inst) maxima.push_back(*std::max_element(scores.begin(), scores.end()));
  return exact_sum(maxima) / static_cast<double>(g.instances);
}

struct OracleSummary {
  FixedChoice best_fixed;
  OracleCorrupt oracle_corrupt;
  double oracle_instance = 0.0;
};

inline OracleSummary summarize_oracles(const ScoreTable& table, Metric metric = Metric::IoU) {
  return OracleSummary{best_fixed(table, metric), oracle_corrupt(table, metric), oracle_instance(table, metric)};
}

// ---- sweeps ----

struct SweepContext {
  const ToyBackbone* backbone = nullptr;
  const Dataset* train_set = nullptr;
  const Dataset* test_set = nullptr;
  TrainConfig train;           // train.seed is the master seed
  AdapterSpec base;            // template for every run
  std::size_t parallel = 1;
};

inline std::uint64_t label_stream(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Seed for one run of a sweep, a function of (master seed, run label) only.
inline std::uint64_t run_seed(std::uint64_t master, std::string_view label) {
  SeededRng rng = SeededRng(master).split(label_stream(label));
  return rng.next_u64();
}

/// Calls fn(i) for i in [0, n) on up to `workers` threads; results are written by index.
template <class Fn>
void parallel_for(std::size_t n, std::size_t workers, Fn&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

struct SweepRun {
  AdapterSpec spec;
  std::string label;
  std::uint64_t seed = 0;
  std::vector<StepRecord> log;
  std::vector<EvalRow> rows;
};

inline void check_context(const SweepContext& ctx) {
  if (!ctx.backbone || !ctx.train_set || !ctx.test_set) throw UsageError("sweep: backbone and datasets are required");
}

/// Independent train+eval run per spec.  Labels must be distinct.
inline std::vector<SweepRun> run_sweep(const std::vector<AdapterSpec>& specs, const SweepContext& ctx) {
  check_context(ctx);
  std::vector<SweepRun> runs(specs.size());
  std::set<std::string> seen;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    runs[i].spec = specs[i];
    runs[i].label = label(specs[i]);
    if (!seen.insert(runs[i].label).second) throw ConfigError("sweep: duplicate run '" + runs[i].label + "'");
    runs[i].seed = run_seed(ctx.train.seed, runs[i].label);
  }
  parallel_for(runs.size(), ctx.parallel, [&](std::size_t i) {
    TrainConfig cfg = ctx.train;
    cfg.seed = runs[i].seed;
    cfg.tau = runs[i].spec.tau;
    RunOutput out = run_experiment(*ctx.backbone, *ctx.train_set, *ctx.test_set, runs[i].spec, cfg);
    runs[i].log = std::move(out.log);
    runs[i].rows = std::move(out.rows);
  });
  return runs;
}

inline ScoreTable to_table(const std::vector<SweepRun>& runs) {
  ScoreTable t;
  for (const auto& r : runs) t.append(r.rows, r.label);
  return t;
}

/// One fixed-rank LoRA per rank, scored on the full test grid.
inline ScoreTable rank_sweep(const std::vector<std::size_t>& ranks, const SweepContext& ctx) {
  check_context(ctx);
  if (ranks.empty()) throw ConfigError("rank_sweep: rank list is empty");
  const std::size_t dim = ctx.backbone->config().dim;
  std::set<std::size_t> seen;
  std::vector<AdapterSpec> specs;
  for (std::size_t r : ranks) {
    if (r == 0 || r > dim) {
      throw ConfigError("rank_sweep: rank " + std::to_string(r) + " outside [1, min(D,K) = " + std::to_string(dim) + "]");
    }
    if (!seen.insert(r).second) throw ConfigError("rank_sweep: duplicate rank " + std::to_string(r));
    AdapterSpec s = ctx.base;
    s.kind = AdapterKind::Lora;
    s.rank = r;
    specs.push_back(s);
  }
  return to_table(run_sweep(specs, ctx));
}

struct TauPoint {
  double tau = 0.0;
  double degraded_iou = 0.0;
};

struct TauSweep {
  std::vector<TauPoint> points;
  double spread() const {
    if (points.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(points.begin(), points.end(),
                                              [](const TauPoint& a, const TauPoint& b) { return a.degraded_iou < b.degraded_iou; });
    return hi->degraded_iou - lo->degraded_iou;
  }
};

/// One GaRA run per temperature.  All runs share the seed of the base spec's
/// label so that only tau differs between them.
inline TauSweep temperature_sweep(const std::vector<double>& taus, const SweepContext& ctx) {
  check_context(ctx);
  if (taus.empty()) throw ConfigError("temperature_sweep: tau list is empty");
  for (double t : taus)
    if (!(t > 0.0)) throw ConfigError("temperature_sweep: tau must be > 0, got " + format_real(t));
  AdapterSpec base = ctx.base;
  base.kind = AdapterKind::Gara;
  const std::uint64_t seed = run_seed(ctx.train.seed, label(base));
  TauSweep out;
  out.points.resize(taus.size());
  parallel_for(taus.size(), ctx.parallel, [&](std::size_t i) {
    AdapterSpec s = base;
    s.tau = taus[i];
    TrainConfig cfg = ctx.train;
    cfg.seed = seed;
    cfg.tau = taus[i];
    const RunOutput run = run_experiment(*ctx.backbone, *ctx.train_set, *ctx.test_set, s, cfg);
    out.points[i] = TauPoint{taus[i], mean_iou(run.rows)};
  });
  return out;
}

// ---- gate telemetry ----

struct GateRecord {
  std::string corruption;
  std::size_t slot = 0;
  GateDecision decision;
};

inline std::vector<GateRecord> gate_records(const std::vector<EvalRow>& rows) {
  std::vector<GateRecord> out;
  for (const auto& r : rows) {
    const std::string kind = r.is_clean ? "clean" : std::string(to_string(r.spec.kind));
    for (const auto& d : r.telemetry.decisions) out.push_back(GateRecord{kind, d.slot, d.decision});
  }
  return out;
}

inline std::size_t hamming(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) {
    throw ShapeError("hamming: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  std::size_t d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] != 0) != (b[i] != 0);
  return d;
}

struct CorruptionGateStats {
  std::string corruption;
  std::size_t decisions = 0;
  double mean_effective_rank = 0.0;
  double higher_frequency = 0.0;          // fraction of decisions selecting the higher space
  std::vector<double> lower_activation;   // per component, over lower-space decisions
  std::vector<double> higher_activation;  // per component, over higher-space decisions
};

struct HammingStats {
  std::size_t pairs = 0;          // same slot, same space, same effective rank
  std::size_t distinct_pairs = 0; // of those, pairs with different activation vectors
  double mean_distance = 0.0;
  std::size_t max_distance = 0;
};

struct GateReport {
  std::vector<CorruptionGateStats> per_corruption;  // sorted by corruption name
  HammingStats same_rank;
};

inline GateReport gate_report(std::span<const GateRecord> records) {
  if (records.empty()) throw UsageError("gate_report: no gate decisions");
  GateReport rep;
  std::map<std::string, std::vector<const GateRecord*>> by_kind;
  for (const auto& r : records) by_kind[r.corruption].push_back(&r);
  for (const auto& [kind, recs] : by_kind) {
    CorruptionGateStats s;
    s.corruption = kind;
    s.decisions = recs.size();
    std::size_t nl = 0, nh = 0;
    double rank_sum = 0.0;
    for (const GateRecord* r : recs) {
      const GateDecision& d = r->decision;
      rank_sum += static_cast<double>(d.effective_rank);
      auto& freq = d.z_space() ? s.higher_activation : s.lower_activation;
      (d.z_space() ? nh : nl) += 1;
      if (freq.size() < d.z.size()) freq.resize(d.z.size(), 0.0);
      for (std::size_t i = 0; i < d.z.size(); ++i) freq[i] += d.z[i] ? 1.0 : 0.0;
    }
    for (auto& v : s.lower_activation) v /= static_cast<double>(nl);
    for (auto& v : s.higher_activation) v /= static_cast<double>(nh);
    s.mean_effective_rank = rank_sum / static_cast<double>(recs.size());
    s.higher_frequency = static_cast<double>(nh) / static_cast<double>(recs.size());
    rep.per_corruption.push_back(std::move(s));
  }

  std::map<std::tuple<std::size_t, int, std::size_t>, std::vector<const GateDecision*>> groups;
  for (const auto& r : records)
    groups[{r.slot, static_cast<int>(r.decision.space), r.decision.effective_rank}].push_back(&r.decision);
  double total = 0.0;
  for (const auto& [key, ds] : groups) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      for (std::size_t j = i + 1; j < ds.size(); ++j) {
        const std::size_t h = hamming(ds[i]->z, ds[j]->z);
        ++rep.same_rank.pairs;
        rep.same_rank.distinct_pairs += h > 0;
        rep.same_rank.max_distance = std::max(rep.same_rank.max_distance, h);
        total += static_cast<double>(h);
      }
    }
  }
  if (rep.same_rank.pairs) rep.same_rank.mean_distance = total / static_cast<double>(rep.same_rank.pairs);
  return rep;
}

inline constexpr std::string_view kTelemetryHeader = "corruption,z_space,effective_rank,activation_bits";

/// One line per decision, in record order (sample order, then slot order).
inline std::string telemetry_csv(std::span<const GateRecord> records) {
  std::string out(kTelemetryHeader);
  out += '\n';
  for (const auto& r : records) {
    out += r.corruption + ',' + (r.decision.z_space() ? "1" : "0") + ',' + std::to_string(r.decision.effective_rank) + ',';
    for (auto b : r.decision.z) out += b ? '1' : '0';
    out += '\n';
  }
  return out;
}

// ---- parameter counting ----

struct ParamCount {
  std::size_t per_slot = 0;
  std::size_t slots = 0;
  std::size_t total = 0;
};

inline ParamCount count_params(const Model& model) {
  ParamCount c;
  for (const auto& s : model.slots()) {
    if (s.empty()) continue;
    ++c.slots;
    c.per_slot = adapter_param_count(s.adapter);
    c.total += c.per_slot;
  }
  return c;
}

}  // namespace gara
