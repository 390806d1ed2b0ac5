// SPDX-License-Identifier: Apache-2.0
//
// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Criteria 5 and 7-10 train on the toy benchmark and take several minutes.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <unistd.h>

#include "gara/analysis.hpp"
#include "gara/baselines.hpp"
#include "gara/config.hpp"
#include "gara/experiment.hpp"
#include "gara/io.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

using namespace gara;
namespace gt = gara::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::printf("criterion %2d: %s  %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

GaraConfig gara_config(std::size_t k, std::size_t d, std::size_t rl, std::size_t rh) {
  GaraConfig c;
  c.input_dim = k;
  c.output_dim = d;
  c.rank_lower = rl;
  c.rank_higher = rh;
  return c;
}

GaraAdapter random_adapter(const GaraConfig& c, SeededRng& rng) {
  GaraAdapter a(c, rng);
  gt::fill_normal(a.lower().b, rng);
  gt::fill_normal(a.higher().b, rng);
  return a;
}

std::vector<std::uint8_t> random_bits(SeededRng& rng, std::size_t n) {
  std::vector<std::uint8_t> z(n);
  for (auto& b : z) b = static_cast<std::uint8_t>(rng.index(2));
  return z;
}

// Random (K, D, r_L, r_H) with r_L < r_H <= K/2 and D, K <= 32.
GaraConfig random_dims(SeededRng& rng) {
  const std::size_t k = 4 + rng.index(29), d = 1 + rng.index(32);
  const std::size_t rh = 2 + rng.index(k / 2 - 1), rl = 1 + rng.index(rh - 1);
  return gara_config(k, d, rl, rh);
}

void criterion_1() {
  const auto t0 = Clock::now();
  SeededRng rng(101);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const GaraAdapter a = random_adapter(random_dims(rng), rng);
    const auto& c = a.config();
    const bool zs = rng.index(2);
    const auto zl = random_bits(rng, c.rank_lower), zh = random_bits(rng, c.rank_higher);
    Matrix naive(c.output_dim, c.input_dim);
    for (std::size_t i = 0; i < zl.size(); ++i)
      if (zl[i] && !zs) naive = naive + outer(a.lower().b_vector(i), a.lower().a_vector(i));
    for (std::size_t j = 0; j < zh.size(); ++j)
      if (zh[j] && zs) naive = naive + outer(a.higher().b_vector(j), a.higher().a_vector(j));
    worst = std::max(worst, max_abs_diff(compose_delta(a, zs, zl, zh), naive));
  }
  const double secs = seconds_since(t0);
  report(1, worst <= 1e-12 && secs < 10.0,
         "compose_delta vs outer-product sum, 1000 configs: max abs diff " + fmt("%.3g", worst) + ", " +
             fmt("%.2f", secs) + " s");
}

void criterion_2() {
  const auto t0 = Clock::now();
  SeededRng rng(102);
  double gate_worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = t % 2 ? 1 : 1 + rng.index(16);
    const double tau = sample_range(rng, 0.3, 2.0);
    ad::Param alpha("alpha", gt::random_matrix(rng, 1, n, 2.0));
    Matrix g(1, n);
    for (auto& x : g.data()) x = sample_gumbel(rng);
    const Matrix w = gt::random_matrix(rng, 1, n), v = gt::random_matrix(rng, 1, n), alpha0 = alpha.value;
    const auto loss = [&](ad::Tape& tape) {
      const ad::Var z = ad::hard_threshold_st(
          ad::sigmoid(ad::scalar_mul(ad::add(tape.leaf(alpha), tape.constant(g)), 1.0 / tau)));
      const ad::Var q = ad::sum(ad::mul(z, tape.constant(v)));
      return ad::add(ad::sum(ad::mul(z, tape.constant(w))), ad::scalar_mul(ad::mul(q, q), 0.5));
    };
    const auto numeric = [&] {
      double lin = 0.0, q = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double z = gt::st_gate(alpha.value[i], alpha0[i], g[i], tau);
        lin += w[i] * z;
        q += v[i] * z;
      }
      return lin + 0.5 * q * q;
    };
    gate_worst = std::max(gate_worst, gt::check_gradients({&alpha}, loss, numeric).max_rel);
  }

  double layer_worst = 0.0;
  bool all_checked = true;
  for (int t = 0; t < 20; ++t) {
    GaraConfig c = gara_config(8, 6, 2, 4);
    c.tau = sample_range(rng, 0.3, 2.0);
    GaraAdapter a = random_adapter(c, rng);
    // Random hidden biases keep ReLU pre-activations off the kink.
    for (Mlp* m : {&a.gates().space_mlp, &a.gates().lower_mlp, &a.gates().higher_mlp})
      for (std::size_t l = 0; l < m->depth(); ++l) gt::fill_normal(m->bias(l), rng, 0.5);
    gt::fill_normal(a.gates().space_mlp.bias(1), rng, 2.0);
    const Matrix x = gt::random_matrix(rng, 3, 8), f = gt::random_matrix(rng, 1, 8), w = gt::random_matrix(rng, 3, 6);
    const SeededRng noise_rng(static_cast<std::uint64_t>(500 + t));
    const gt::FrozenNoise noise(noise_rng, 2, 4);
    const gt::GateLogits at = gt::gate_logits(a, f);
    std::vector<ad::Param*> params;
    a.for_each_param([&](ad::Param& p) { params.push_back(&p); });
    const auto loss = [&](ad::Tape& tape) {
      SeededRng r = noise_rng;
      return gt::head_loss(tape, a.delta(tape, tape.constant(x), tape.constant(f), r, Mode::Train), w);
    };
    const auto numeric = [&] { return gt::head_loss(gt::surrogate_delta(a, x, f, noise, at), w); };
    const auto res = gt::check_gradients(params, loss, numeric);
    all_checked = all_checked && res.checked == param_count(a);
    layer_worst = std::max(layer_worst, res.max_rel);
  }
  const double secs = seconds_since(t0);
  report(2, gate_worst < 1e-4 && layer_worst < 1e-4 && all_checked && secs < 30.0,
         "straight-through vs central differences: 200 gates max rel " + fmt("%.3g", gate_worst) +
             ", 20 full layers max rel " + fmt("%.3g", layer_worst) + ", " + fmt("%.2f", secs) + " s");
}

void criterion_3() {
  SeededRng rng(103);
  double value_diff = 0.0, grad_diff = 0.0;
  for (int t = 0; t < 50; ++t) {
    GaraConfig c = gara_config(16, 12, 1 + rng.index(4), 6);
    GaraAdapter g(c, rng);
    gt::fill_normal(g.lower().b, rng);
    LoraAdapter lora(c.rank_lower, 12, 16, rng);
    lora.a().value = g.lower().a.value;
    lora.b().value = g.lower().b.value;
    const Matrix x = gt::random_matrix(rng, 3, 16), w = gt::random_matrix(rng, 3, 12);
    GateOverride ov;
    ov.z_space = false;
    ov.z_lower.assign(c.rank_lower, 1);
    ov.z_higher.assign(c.rank_higher, 0);
    ad::Tape tg, tl;
    const ad::Var dg =
        g.delta(tg, tg.constant(x), tg.constant(gt::random_matrix(rng, 1, 16)), rng, Mode::Train, nullptr, &ov);
    const ad::Var dl = lora.delta(tl, tl.constant(x));
    value_diff = std::max(value_diff, max_abs_diff(dg.value(), dl.value()));
    tg.backward(gt::head_loss(tg, dg, w));
    tl.backward(gt::head_loss(tl, dl, w));
    grad_diff = std::max({grad_diff, max_abs_diff(g.lower().a.grad, lora.a().grad),
                          max_abs_diff(g.lower().b.grad, lora.b().grad)});
  }
  report(3, value_diff <= 1e-10 && grad_diff <= 1e-10,
         "GaRA pinned to the lower space vs LoRA, 50 cases: forward diff " + fmt("%.3g", value_diff) +
             ", gradient diff " + fmt("%.3g", grad_diff));
}

void criterion_4() {
  SeededRng rng(104);
  int violations = 0;
  for (int t = 0; t < 500; ++t) {
    GaraAdapter a = random_adapter(random_dims(rng), rng);
    const auto& c = a.config();
    // Spread the gate logits so decisions vary across inputs.
    for (Mlp* m : {&a.gates().space_mlp, &a.gates().lower_mlp, &a.gates().higher_mlp})
      gt::fill_normal(m->bias(m->depth() - 1), rng, 1.5);
    const Matrix x = gt::random_matrix(rng, 1, c.input_dim);
    GateDecision d;
    ad::Tape tape(false);
    (void)a.delta(tape, tape.constant(x), tape.constant(x), rng, t % 2 ? Mode::Train : Mode::Eval, &d);
    const std::size_t zs = d.z_space();
    std::vector<std::uint8_t> zl(c.rank_lower, 0), zh(c.rank_higher, 0);
    (zs ? zh : zl) = d.z;
    violations += numerical_rank(compose_delta(a, zs, zl, zh)) > popcount(d.z);
  }
  report(4, violations == 0, "numerical rank <= active gates over 500 adapters and inputs: " +
                                 std::to_string(violations) + " violations");
}

void criterion_5(const gt::Fixture& fx) {
  const auto t0 = Clock::now();
  TrainConfig cfg = fx.cfg.trainer;
  cfg.seed = 0;
  cfg.steps = 500;
  auto run = [&] {
    Model m = build_model(fx.backbone, fx.cfg.adapter, cfg.seed);
    set_model_tau(m, cfg.tau);
    auto res = train(m, fx.train, cfg);
    return std::make_pair(std::move(res.log), io::encode(m));
  };
  const auto [log1, ckpt1] = run();
  const auto [log2, ckpt2] = run();
  bool same_log = log1.size() == log2.size() && log1.size() == 500;
  for (std::size_t i = 0; same_log && i < log1.size(); ++i) same_log = log1[i].loss == log2[i].loss;

  Model trained = io::decode_model(ckpt1);
  bool eval_free = true;
  for (std::size_t i = 0; i < fx.test.size(); i += 10) {
    const auto a = forward_segment(trained, fx.test[i].corrupted, Mode::Eval, SeededRng(1));
    const auto b = forward_segment(trained, fx.test[i].corrupted, Mode::Eval, SeededRng(987654321));
    eval_free = eval_free && a.logits == b.logits && a.telemetry.decisions == b.telemetry.decisions;
  }
  report(5, same_log && ckpt1 == ckpt2 && eval_free,
         std::string("two 500-step runs, seed 0: loss logs ") + (same_log ? "identical" : "differ") +
             ", checkpoints " + (ckpt1 == ckpt2 ? "identical" : "differ") + ", Eval outputs " +
             (eval_free ? "RNG-independent" : "depend on RNG") + ", " + fmt("%.0f", seconds_since(t0)) + " s");
}

void criterion_6(const gt::Fixture& fx) {
  Model frozen{fx.backbone};
  SeededRng rng(106);
  std::size_t mismatches = 0, compared = 0;
  for (AdapterKind k : {AdapterKind::Gara, AdapterKind::Lora, AdapterKind::Moe, AdapterKind::Unified}) {
    AdapterSpec spec = fx.cfg.adapter;
    spec.kind = k;
    Model adapted = build_model(fx.backbone, spec, 0);
    for (int t = 0; t < 100; ++t) {
      Image img(fx.cfg.bench.image_size, fx.cfg.bench.image_size);
      for (auto& v : img.data()) v = sample_uniform(rng);
      const Matrix ref = forward_segment(frozen, img, Mode::Eval, SeededRng(0)).logits;
      mismatches += forward_segment(adapted, img, Mode::Eval, SeededRng(0)).logits != ref;
      mismatches += forward_segment(adapted, img, Mode::Train, SeededRng(t)).logits != ref;
      compared += 2;
    }
  }
  report(6, mismatches == 0, "step-0 adapted models vs frozen backbone, 100 random inputs x 4 adapter kinds x 2 modes: " +
                                 std::to_string(mismatches) + " of " + std::to_string(compared) + " differ");
}

struct SeedRuns {
  std::vector<SweepRun> runs;
  double seconds = 0.0;
};

std::vector<AdapterSpec> table5_specs(const AdapterSpec& base, const std::vector<std::size_t>& ranks) {
  std::vector<AdapterSpec> specs;
  AdapterSpec g = base;
  g.kind = AdapterKind::Gara;
  specs.push_back(g);
  for (std::size_t r : ranks) {
    AdapterSpec s = base;
    s.kind = AdapterKind::Lora;
    s.rank = r;
    specs.push_back(s);
  }
  for (std::size_t r : {base.rank_lower, base.rank_higher}) {
    AdapterSpec s = base;
    s.kind = AdapterKind::Unified;
    s.rank = r;
    specs.push_back(s);
  }
  return specs;
}

void criteria_7_to_10(const gt::Fixture& fx) {
  const auto& cfg = fx.cfg;
  SweepContext ctx;
  ctx.backbone = &fx.backbone;
  ctx.train_set = &fx.train;
  ctx.test_set = &fx.test;
  ctx.train = cfg.trainer;
  ctx.base = cfg.adapter;
  ctx.parallel = cfg.analysis.parallel;

  const auto specs = table5_specs(cfg.adapter, cfg.analysis.ranks);
  std::map<std::string, double> mean_over_seeds;
  std::map<std::string, std::string> per_seed;
  std::vector<SweepRun> first_seed;
  double seed0_lora_seconds = 0.0;
  for (std::uint64_t seed : cfg.analysis.seeds) {
    ctx.train.seed = seed;
    const auto t0 = Clock::now();
    auto runs = run_sweep(specs, ctx);
    const double secs = seconds_since(t0);
    for (const auto& r : runs) {
      const double v = mean_iou(r.rows);
      mean_over_seeds[r.label] += v / static_cast<double>(cfg.analysis.seeds.size());
      per_seed[r.label] += (per_seed[r.label].empty() ? "" : "/") + fmt("%.4f", v);
    }
    if (first_seed.empty()) {
      first_seed = std::move(runs);
      seed0_lora_seconds = secs * static_cast<double>(cfg.analysis.ranks.size()) / static_cast<double>(specs.size());
    }
    std::printf("  seed %llu: %zu runs in %.0f s\n", static_cast<unsigned long long>(seed), specs.size(), secs);
    std::fflush(stdout);
  }

  // 7: oracle analysis of the first seed's fixed-rank table.
  std::vector<SweepRun> lora_runs;
  for (const auto& r : first_seed)
    if (r.spec.kind == AdapterKind::Lora) lora_runs.push_back(r);
  const ScoreTable table = to_table(lora_runs);
  const OracleSummary s = summarize_oracles(table);
  const bool chain = s.oracle_instance >= s.oracle_corrupt.aggregate && s.oracle_corrupt.aggregate >= s.best_fixed.mean;
  const double gap = s.oracle_instance - s.best_fixed.mean;
  std::string choice;
  for (const auto& [kind, model] : s.oracle_corrupt.choice) choice += (choice.empty() ? "" : " ") + kind + "=" + model;
  report(7, chain && gap >= 0.01 && seed0_lora_seconds < 900.0,
         "ranks {1,2,4,8,16}: best fixed " + fmt("%.4f", s.best_fixed.mean) + " (rank " + s.best_fixed.model +
             "), Oracle-Corrupt " + fmt("%.4f", s.oracle_corrupt.aggregate) + ", Oracle-Instance " +
             fmt("%.4f", s.oracle_instance) + ", gap " + fmt("%.4f", gap) + ", chain " + (chain ? "holds" : "broken") +
             ", ~" + fmt("%.0f", seed0_lora_seconds) + " s; per-corruption best rank: " + choice +
             (s.oracle_corrupt.choice_varies() ? " (varies)" : " (constant)"));

  // 8 and 9: three-seed means under one shared budget.
  const double gara = mean_over_seeds.at("gara");
  std::string best_lora;
  double best_lora_v = -1.0;
  std::string lora_list;
  for (std::size_t r : cfg.analysis.ranks) {
    const std::string l = std::to_string(r);
    lora_list += " r" + l + "=" + fmt("%.4f", mean_over_seeds.at(l));
    if (mean_over_seeds.at(l) > best_lora_v) {
      best_lora_v = mean_over_seeds.at(l);
      best_lora = l;
    }
  }
  report(8, gara >= best_lora_v,
         "mean degraded IoU over " + std::to_string(cfg.analysis.seeds.size()) + " seeds: GaRA " + fmt("%.4f", gara) +
             " (" + per_seed.at("gara") + "), LoRA" + lora_list + "; best LoRA rank " + best_lora + ", margin " +
             fmt("%+.4f", gara - best_lora_v));

  const std::string u_lo = "unified" + std::to_string(cfg.adapter.rank_lower);
  const std::string u_hi = "unified" + std::to_string(cfg.adapter.rank_higher);
  const double ulo = mean_over_seeds.at(u_lo), uhi = mean_over_seeds.at(u_hi);
  report(9, gara >= ulo && gara >= uhi,
         "GaRA " + fmt("%.4f", gara) + " vs single-space max-rank " + std::to_string(cfg.adapter.rank_lower) + " " +
             fmt("%.4f", ulo) + " (" + per_seed.at(u_lo) + "), max-rank " + std::to_string(cfg.adapter.rank_higher) +
             " " + fmt("%.4f", uhi) + " (" + per_seed.at(u_hi) + "); margins " + fmt("%+.4f", gara - ulo) + ", " +
             fmt("%+.4f", gara - uhi));

  // 10: temperature stability, first master seed.
  const auto t0 = Clock::now();
  ctx.train.seed = cfg.analysis.seeds.front();
  const TauSweep sweep = temperature_sweep(cfg.analysis.taus, ctx);
  std::string pts;
  for (const auto& p : sweep.points) pts += " tau=" + format_real(p.tau) + ":" + fmt("%.4f", p.degraded_iou);
  report(10, sweep.spread() < 0.05,
         "degraded IoU across temperatures:" + pts + "; spread " + fmt("%.4f", sweep.spread()) + " (threshold 0.05), " +
             fmt("%.0f", seconds_since(t0)) + " s");
}

void criterion_11() {
  SeededRng rng(111);
  double worst = 0.0;
  bool ordered = true;
  for (int t = 0; t < 10000; ++t) {
    const double p = sample_uniform(rng), q = sample_uniform(rng);
    Mask a(6, 6), b(6, 6);
    for (auto& x : a.bits) x = sample_uniform(rng) < p;
    for (auto& x : b.bits) x = sample_uniform(rng) < q;
    const double i = iou(a, b), d = dice(a, b);
    worst = std::max(worst, std::abs(d - 2.0 * i / (1.0 + i)));
    ordered = ordered && d >= i;
  }
  Mask a(4, 4), b(4, 4);
  for (std::size_t i : {0, 1, 2, 3}) a.bits[i] = 1;
  for (std::size_t i : {2, 3, 4, 5, 6, 7}) b.bits[i] = 1;
  const bool fixtures = iou(a, b) == 0.25 && dice(a, b) == 0.4 && iou(a, a) == 1.0 && dice(a, a) == 1.0 &&
                        iou(Mask(3, 3), Mask(3, 3)) == 1.0 && iou(a, Mask(4, 4)) == 0.0;
  report(11, worst <= 1e-12 && ordered && fixtures,
         "dice = 2 iou / (1 + iou) on 10^4 mask pairs: max error " + fmt("%.3g", worst) + "; hand-counted fixtures " +
             (fixtures ? "exact" : "wrong"));
}

void criterion_12(const gt::Fixture& fx) {
  const auto dir = std::filesystem::temp_directory_path() / ("gara_accept_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  bool identical = true;
  std::size_t files = 0;
  SeededRng rng(112);
  for (AdapterKind k : {AdapterKind::None, AdapterKind::Gara, AdapterKind::Lora, AdapterKind::Moe, AdapterKind::Unified}) {
    AdapterSpec spec = fx.cfg.adapter;
    spec.kind = k;
    Model m = build_model(fx.backbone, spec, 3);
    for (auto* p : m.adapter_params()) gt::fill_normal(*p, rng, 0.1);
    const auto p1 = dir / "a.ckpt", p2 = dir / "b.ckpt";
    io::save_model(p1, m);
    io::save_model(p2, io::load_model(p1));
    identical = identical && io::read_file(p1) == io::read_file(p2);
    ++files;
  }
  io::save_backbone(dir / "bb1.ckpt", fx.backbone);
  io::save_backbone(dir / "bb2.ckpt", io::load_backbone(dir / "bb1.ckpt"));
  identical = identical && io::read_file(dir / "bb1.ckpt") == io::read_file(dir / "bb2.ckpt");
  ++files;
  std::filesystem::remove_all(dir);
  report(12, identical, "save -> load -> save for " + std::to_string(files) + " checkpoints (backbone, model per adapter kind): " +
                            (identical ? "byte-identical" : "bytes differ"));
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  try {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    const gt::Fixture& fx = gt::fixture();
    std::printf("  backbone clean IoU %.4f; trainer: %zu steps, lr %g, batch %zu, tau %g\n", fx.clean_iou,
                fx.cfg.trainer.steps, fx.cfg.trainer.learning_rate, fx.cfg.trainer.batch_size, fx.cfg.trainer.tau);
    criterion_5(fx);
    criterion_6(fx);
    criteria_7_to_10(fx);
    criterion_11();
    criterion_12(fx);
  } catch (const std::exception& e) {
    std::printf("acceptance aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%d of 12 criteria failed, %.0f s total\n", failures, seconds_since(t0));
  return failures ? 1 : 0;
}
