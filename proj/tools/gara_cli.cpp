// SPDX-License-Identifier: Apache-2.0
//
// gara: experiment driver.
//
//   gara gen-data    [--config F] [--out D]
//   gara pretrain    [--config F] [--out D]
//   gara train       --backbone CKPT [--config F] [--seed N] [--out D]
//   gara eval        --model CKPT [--config F] [--out D]
//   gara sweep-rank  --backbone CKPT [--config F] [--seed N] [--parallel N] [--out D]
//   gara oracle      --scores CSV [--out D]
//   gara sweep-tau   --backbone CKPT [--config F] [--seed N] [--parallel N] [--out D]
//   gara gate-report --model CKPT [--config F] [--out D]
//   gara param-count [--config F]
//
// Every command writes into a fresh run directory <out>/<timestamp>_<seed>
// holding its artifacts and the resolved configuration.
//
// Exit codes: 0 ok, 1 other failure, 2 bad configuration, 3 missing input
// file, 4 training divergence.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gara/analysis.hpp"
#include "gara/config.hpp"
#include "gara/experiment.hpp"
#include "gara/io.hpp"
#include "gara/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> parallel;
  std::string out = "runs";
  std::string backbone;
  std::string model;
  std::string scores;
};

gara::ExperimentConfig load_config(const Options& o) {
  gara::ExperimentConfig cfg = gara::default_config();
  if (!o.config_path.empty()) {
    std::string text;
    try {
      text = gara::io::read_file(o.config_path);
    } catch (const gara::MissingFileError& e) {
      throw gara::ConfigError(std::string("config file: ") + e.what());
    }
    cfg = gara::parse_config(text);
  }
  if (o.seed) cfg.trainer.seed = *o.seed;
  if (o.parallel) {
    if (*o.parallel == 0) throw gara::ConfigError("--parallel must be >= 1");
    cfg.analysis.parallel = *o.parallel;
  }
  return cfg;
}

fs::path make_run_dir(const Options& o, std::uint64_t seed) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
  const std::string base = std::string(stamp) + "_" + std::to_string(seed);
  fs::path dir = fs::path(o.out) / base;
  for (int i = 1; fs::exists(dir); ++i) dir = fs::path(o.out) / (base + "." + std::to_string(i));
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& s) { gara::io::write_file(p, s); }

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

fs::path start_run(const Options& o, const gara::ExperimentConfig& cfg) {
  const fs::path dir = make_run_dir(o, cfg.trainer.seed);
  write_text(dir / "config.resolved", gara::to_text(cfg));
  std::cout << "run directory: " << dir.string() << "\n";
  return dir;
}

std::string model_label(const gara::Model& m) {
  for (const auto& s : m.slots()) {
    if (s.empty()) continue;
    return std::visit([](const auto& a) -> std::string {
      using T = std::decay_t<decltype(a)>;
      if constexpr (std::is_same_v<T, gara::GaraAdapter>) return "gara";
      else if constexpr (std::is_same_v<T, gara::LoraAdapter>) return std::to_string(a.rank());
      else if constexpr (std::is_same_v<T, gara::MoeLoraAdapter>) return "moe";
      else if constexpr (std::is_same_v<T, gara::UnifiedGatedAdapter>) return "unified" + std::to_string(a.config().rank);
      else return "none";
    }, s.adapter);
  }
  return "none";
}

json eval_summary(const std::vector<gara::EvalRow>& rows, const gara::BenchConfig& bench) {
  std::vector<gara::EvalRow> seen, unseen;
  for (const auto& r : rows) (gara::is_seen(bench, r.spec) ? seen : unseen).push_back(r);
  json j;
  j["samples"] = rows.size();
  j["degraded_iou"] = gara::mean_iou(rows);
  j["degraded_dice"] = gara::mean_dice(rows);
  j["seen_iou"] = gara::mean_iou(seen);
  j["unseen_iou"] = gara::mean_iou(unseen);
  return j;
}

std::string require(const std::string& path, const char* flag) {
  if (path.empty()) throw gara::ConfigError(std::string(flag) + " is required for this command");
  return path;
}

int cmd_gen_data(const Options& o) {
  const auto cfg = load_config(o);
  const fs::path dir = start_run(o, cfg);
  const struct {
    const char* name;
    gara::Dataset data;
  } sets[] = {
      {"clean_train", gara::make_clean_set(cfg.bench, gara::Pool::CleanTrain, cfg.bench.clean_train_images)},
      {"clean_test", gara::make_clean_set(cfg.bench, gara::Pool::CleanTest, cfg.bench.clean_test_images)},
      {"train", gara::make_train_set(cfg.bench)},
      {"test", gara::make_test_set(cfg.bench)},
  };
  for (const auto& s : sets) {
    std::ostringstream manifest;
    gara::io::write_manifest(manifest, s.data);
    write_text(dir / (std::string(s.name) + "_manifest.jsonl"), manifest.str());
    gara::io::write_file(dir / (std::string(s.name) + "_images.bin"), gara::io::encode_images(s.data));
    std::cout << s.name << ": " << s.data.size() << " samples\n";
  }
  return 0;
}

int cmd_pretrain(const Options& o) {
  const auto cfg = load_config(o);
  const fs::path dir = start_run(o, cfg);
  const auto clean = gara::make_clean_set(cfg.bench, gara::Pool::CleanTrain, cfg.bench.clean_train_images);
  const auto hold = gara::make_clean_set(cfg.bench, gara::Pool::CleanTest, cfg.bench.clean_test_images);
  try {
    const auto res = gara::pretrain_backbone(clean, hold, cfg.backbone, cfg.pretrain);
    gara::io::save_backbone(dir / "backbone.ckpt", res.backbone);
    json j;
    j["clean_iou"] = res.clean_iou;
    j["loss_curve"] = res.loss_curve;
    j["warning"] = res.warning ? "no training epochs; random backbone" : "";
    write_json(dir / "pretrain.json", j);
    std::cout << "clean IoU " << gara::format_real(res.clean_iou) << (res.warning ? " (warning: 0 epochs)" : "") << "\n";
  } catch (const gara::PretrainError& e) {
    json j;
    j["clean_iou"] = e.clean_iou();
    j["loss_curve"] = e.loss_curve();
    j["error"] = e.what();
    write_json(dir / "pretrain.json", j);
    throw;
  }
  return 0;
}

int cmd_train(const Options& o) {
  const auto cfg = load_config(o);
  const auto backbone = gara::io::load_backbone(require(o.backbone, "--backbone"));
  const fs::path dir = start_run(o, cfg);
  const auto train_set = gara::make_train_set(cfg.bench);
  gara::Model model = gara::build_model(backbone, cfg.adapter, cfg.trainer.seed);
  gara::set_model_tau(model, cfg.trainer.tau);
  std::ofstream log(dir / "train_log.jsonl");
  const auto on_step = [&](const gara::StepRecord& r) {
    json j;
    j["step"] = r.step;
    j["loss"] = r.loss;
    j["mean_rank_lower"] = r.telemetry.mean_rank_lower;
    j["mean_rank_higher"] = r.telemetry.mean_rank_higher;
    j["frac_higher"] = r.telemetry.frac_higher;
    log << j.dump() << '\n';
  };
  if (cfg.adapter.kind != gara::AdapterKind::None) gara::train(model, train_set, cfg.trainer, on_step);
  log.close();
  gara::io::save_model(dir / "model.ckpt", model);
  std::cout << "trained " << cfg.trainer.steps << " steps, checkpoint " << (dir / "model.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  const auto cfg = load_config(o);
  gara::Model model = gara::io::load_model(require(o.model, "--model"));
  const fs::path dir = start_run(o, cfg);
  const auto rows = gara::evaluate(model, gara::make_test_set(cfg.bench));
  gara::ScoreTable table;
  table.append(rows, model_label(model));
  write_text(dir / "scores.csv", table.to_csv());
  const auto records = gara::gate_records(rows);
  if (!records.empty()) write_text(dir / "gate_telemetry.csv", gara::telemetry_csv(records));
  const json summary = eval_summary(rows, cfg.bench);
  write_json(dir / "eval.json", summary);
  std::cout << "degraded IoU " << gara::format_real(summary["degraded_iou"].get<double>()) << "\n";
  return 0;
}

gara::SweepContext sweep_context(const gara::ExperimentConfig& cfg, const gara::ToyBackbone& bb,
                                 const gara::Dataset& train, const gara::Dataset& test) {
  gara::SweepContext ctx;
  ctx.backbone = &bb;
  ctx.train_set = &train;
  ctx.test_set = &test;
  ctx.train = cfg.trainer;
  ctx.base = cfg.adapter;
  ctx.parallel = cfg.analysis.parallel;
  return ctx;
}

int cmd_sweep_rank(const Options& o) {
  const auto cfg = load_config(o);
  const auto backbone = gara::io::load_backbone(require(o.backbone, "--backbone"));
  const fs::path dir = start_run(o, cfg);
  const auto train = gara::make_train_set(cfg.bench);
  const auto test = gara::make_test_set(cfg.bench);
  const auto table = gara::rank_sweep(cfg.analysis.ranks, sweep_context(cfg, backbone, train, test));
  write_text(dir / "scores.csv", table.to_csv());
  for (const auto& m : table.models()) std::cout << "rank " << m << ": IoU " << gara::format_real(table.mean(m)) << "\n";
  return 0;
}

int cmd_oracle(const Options& o) {
  const auto table = gara::ScoreTable::from_csv(gara::io::read_file(require(o.scores, "--scores")));
  const auto s = gara::summarize_oracles(table);
  const gara::ExperimentConfig cfg = load_config(o);
  const fs::path dir = start_run(o, cfg);
  json j;
  j["aggregation"] = "pooled mean over images";
  j["metric"] = "iou";
  j["best_fixed"] = {{"model", s.best_fixed.model}, {"mean", s.best_fixed.mean}};
  json choice = json::object();
  for (const auto& [kind, model] : s.oracle_corrupt.choice) choice[kind] = model;
  j["oracle_corrupt"] = {{"aggregate", s.oracle_corrupt.aggregate}, {"choice", choice}};
  j["oracle_instance"] = s.oracle_instance;
  j["best_rank_varies"] = s.oracle_corrupt.choice_varies();
  write_json(dir / "oracle.json", j);
  std::cout << "best_fixed " << gara::format_real(s.best_fixed.mean) << " (" << s.best_fixed.model << ")\n"
            << "oracle_corrupt " << gara::format_real(s.oracle_corrupt.aggregate) << "\n"
            << "oracle_instance " << gara::format_real(s.oracle_instance) << "\n";
  return 0;
}

int cmd_sweep_tau(const Options& o) {
  const auto cfg = load_config(o);
  const auto backbone = gara::io::load_backbone(require(o.backbone, "--backbone"));
  const fs::path dir = start_run(o, cfg);
  const auto train = gara::make_train_set(cfg.bench);
  const auto test = gara::make_test_set(cfg.bench);
  const auto sweep = gara::temperature_sweep(cfg.analysis.taus, sweep_context(cfg, backbone, train, test));
  std::string csv = "tau,degraded_iou\n";
  for (const auto& p : sweep.points) {
    csv += gara::format_real(p.tau) + "," + gara::format_real(p.degraded_iou) + "\n";
    std::cout << "tau " << gara::format_real(p.tau) << ": IoU " << gara::format_real(p.degraded_iou) << "\n";
  }
  write_text(dir / "tau_sweep.csv", csv);
  std::cout << "spread " << gara::format_real(sweep.spread()) << "\n";
  return 0;
}

int cmd_gate_report(const Options& o) {
  const auto cfg = load_config(o);
  gara::Model model = gara::io::load_model(require(o.model, "--model"));
  const fs::path dir = start_run(o, cfg);
  const auto rows = gara::evaluate(model, gara::make_test_set(cfg.bench));
  const auto records = gara::gate_records(rows);
  if (records.empty()) throw gara::ConfigError("gate-report: the model has no gated adapters");
  write_text(dir / "gate_telemetry.csv", gara::telemetry_csv(records));
  const auto rep = gara::gate_report(records);
  json per = json::array();
  for (const auto& s : rep.per_corruption) {
    per.push_back({{"corruption", s.corruption},
                   {"decisions", s.decisions},
                   {"mean_effective_rank", s.mean_effective_rank},
                   {"higher_frequency", s.higher_frequency},
                   {"lower_activation", s.lower_activation},
                   {"higher_activation", s.higher_activation}});
    std::cout << s.corruption << ": mean rank " << gara::format_real(s.mean_effective_rank) << ", higher space "
              << gara::format_real(s.higher_frequency) << "\n";
  }
  json j;
  j["per_corruption"] = per;
  j["same_rank_hamming"] = {{"pairs", rep.same_rank.pairs},
                            {"distinct_pairs", rep.same_rank.distinct_pairs},
                            {"mean_distance", rep.same_rank.mean_distance},
                            {"max_distance", rep.same_rank.max_distance}};
  write_json(dir / "gate_report.json", j);
  return 0;
}

int cmd_param_count(const Options& o) {
  const auto cfg = load_config(o);
  const gara::Model model = gara::build_model(gara::ToyBackbone(cfg.backbone), cfg.adapter, cfg.trainer.seed);
  const auto c = gara::count_params(model);
  std::cout << "adapter kind " << gara::to_string(cfg.adapter.kind) << "\n"
            << "per slot " << c.per_slot << "\n"
            << "slots " << c.slots << "\n"
            << "total " << c.total << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gated-rank adaptation experiments on a toy corruption benchmark"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config_path, "Experiment config (section.field = value)");
  app.add_option("--seed", o.seed, "Master seed, overrides trainer.seed");
  app.add_option("--out", o.out, "Parent directory for run directories")->capture_default_str();
  app.add_option("--parallel", o.parallel, "Concurrent runs in sweeps, overrides analysis.parallel");

  int (*handler)(const Options&) = nullptr;
  auto sub = [&](const char* name, const char* help, int (*fn)(const Options&)) {
    CLI::App* s = app.add_subcommand(name, help);
    s->callback([&handler, fn] { handler = fn; });
    return s;
  };
  sub("gen-data", "Generate the corruption benchmark and write manifests", cmd_gen_data);
  sub("pretrain", "Pretrain and freeze the toy backbone on clean images", cmd_pretrain);
  sub("train", "Train adapters on corrupted images", cmd_train)
      ->add_option("--backbone", o.backbone, "Backbone checkpoint");
  sub("eval", "Score a model checkpoint on the corrupted test grid", cmd_eval)
      ->add_option("--model", o.model, "Model checkpoint");
  sub("sweep-rank", "Train one fixed-rank LoRA per rank and emit the score table", cmd_sweep_rank)
      ->add_option("--backbone", o.backbone, "Backbone checkpoint");
  sub("oracle", "Best fixed rank, Oracle-Corrupt and Oracle-Instance of a score table", cmd_oracle)
      ->add_option("--scores", o.scores, "Score table CSV");
  sub("sweep-tau", "Train GaRA once per Gumbel temperature", cmd_sweep_tau)
      ->add_option("--backbone", o.backbone, "Backbone checkpoint");
  sub("gate-report", "Gate telemetry of a model checkpoint on the test grid", cmd_gate_report)
      ->add_option("--model", o.model, "Model checkpoint");
  sub("param-count", "Learnable adapter parameters of the configured model", cmd_param_count);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    return handler(o);
  } catch (const gara::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const gara::MissingFileError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const gara::DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
