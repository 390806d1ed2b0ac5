// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "gara/analysis.hpp"
#include "gara/experiment.hpp"

using namespace gara;

namespace {

ScoreRow row(std::size_t image, std::string kind, int sev, std::string model, double iou) {
  return ScoreRow{image, std::move(kind), sev, std::move(model), iou, 2.0 * iou / (1.0 + iou)};
}

// 2 ranks x 1 corruption x 2 images: rank 1 = [0.5, 0.9], rank 2 = [0.8, 0.6].
ScoreTable two_by_two() {
  ScoreTable t;
  t.add(row(0, "gaussian_noise", 1, "1", 0.5));
  t.add(row(1, "gaussian_noise", 1, "1", 0.9));
  t.add(row(0, "gaussian_noise", 1, "2", 0.8));
  t.add(row(1, "gaussian_noise", 1, "2", 0.6));
  return t;
}

ScoreTable random_table(SeededRng& rng, std::size_t models, std::size_t kinds, std::size_t images) {
  static const char* names[] = {"brightness", "contrast", "gaussian_noise", "box_blur", "salt_pepper"};
  ScoreTable t;
  for (std::size_t m = 0; m < models; ++m)
    for (std::size_t k = 0; k < kinds; ++k)
      for (std::size_t i = 0; i < images; ++i)
        t.add(row(i, names[k], 1 + static_cast<int>(i % 5), std::to_string(1u << m), sample_uniform(rng)));
  return t;
}

struct Tiny {
  ToyBackbone backbone;
  Dataset train, test;
};

// A small pipeline: 16-pixel images, 16-wide tokens, a handful of samples.
const Tiny& tiny() {
  static const Tiny t = [] {
    BackboneConfig b;
    b.image_size = 16;
    b.patch = 4;
    b.dim = 16;
    b.ff_hidden = 16;
    BenchConfig bench;
    bench.image_size = 16;
    bench.train_images = 2;
    bench.test_images = 1;
    ToyBackbone bb(b);
    bb.set_trainable(false);
    return Tiny{std::move(bb), make_train_set(bench), make_test_set(bench)};
  }();
  return t;
}

SweepContext tiny_context(std::size_t steps = 3) {
  SweepContext ctx;
  ctx.backbone = &tiny().backbone;
  ctx.train_set = &tiny().train;
  ctx.test_set = &tiny().test;
  ctx.train.learning_rate = 1e-3;
  ctx.train.steps = steps;
  ctx.train.batch_size = 2;
  ctx.base.rank_higher = 8;
  return ctx;
}

GateRecord record(std::string kind, std::size_t slot, Space space, std::vector<std::uint8_t> z) {
  GateDecision d;
  d.space = space;
  d.effective_rank = static_cast<std::size_t>(std::count(z.begin(), z.end(), 1));
  d.z = std::move(z);
  return GateRecord{std::move(kind), slot, std::move(d)};
}

}  // namespace

// ---- oracles ----

TEST(Oracle, TieGoesToSmallerRank) {
  const auto oc = oracle_corrupt(two_by_two());
  ASSERT_EQ(oc.choice.size(), 1u);
  EXPECT_EQ(oc.choice[0].second, "1");
  EXPECT_DOUBLE_EQ(oc.aggregate, 0.7);
  EXPECT_EQ(best_fixed(two_by_two()).model, "1");
}

TEST(Oracle, InstanceTakesPerImageMaximum) {
  EXPECT_DOUBLE_EQ(oracle_instance(two_by_two()), 0.85);
}

TEST(Oracle, SingleRankHasNoChoice) {
  ScoreTable t;
  t.add(row(0, "contrast", 2, "4", 0.3));
  t.add(row(1, "contrast", 2, "4", 0.6));
  t.add(row(0, "brightness", 1, "4", 0.9));
  const auto s = summarize_oracles(t);
  EXPECT_EQ(s.best_fixed.model, "4");
  EXPECT_DOUBLE_EQ(s.best_fixed.mean, 0.6);
  EXPECT_DOUBLE_EQ(s.oracle_corrupt.aggregate, 0.6);
  EXPECT_DOUBLE_EQ(s.oracle_instance, 0.6);
  EXPECT_FALSE(s.oracle_corrupt.choice_varies());
}

TEST(Oracle, DominanceChainOnRandomTables) {
  SeededRng rng(1);
  for (int t = 0; t < 500; ++t) {
    const ScoreTable table = random_table(rng, 1 + rng.index(5), 1 + rng.index(5), 1 + rng.index(6));
    const auto s = summarize_oracles(table);
    ASSERT_GE(s.oracle_instance, s.oracle_corrupt.aggregate);
    ASSERT_GE(s.oracle_corrupt.aggregate, s.best_fixed.mean);
  }
}

TEST(Oracle, IdenticalRowsCoincide) {
  SeededRng rng(2);
  ScoreTable t;
  for (std::size_t i = 0; i < 7; ++i) {
    const double v = sample_uniform(rng);
    for (const char* m : {"1", "2", "8"}) t.add(row(i, "box_blur", 3, m, v));
  }
  const auto s = summarize_oracles(t);
  EXPECT_EQ(s.best_fixed.model, "1");
  EXPECT_EQ(s.best_fixed.mean, s.oracle_corrupt.aggregate);
  EXPECT_EQ(s.oracle_corrupt.aggregate, s.oracle_instance);
}

TEST(Oracle, PureAndOrderIndependent) {
  SeededRng rng(3);
  const ScoreTable t = random_table(rng, 4, 3, 5);
  std::vector<ScoreRow> rows = t.rows();
  std::reverse(rows.begin(), rows.end());
  ScoreTable r;
  for (auto& x : rows) r.add(x);
  const auto a = summarize_oracles(t), b = summarize_oracles(t), c = summarize_oracles(r);
  EXPECT_EQ(a.oracle_instance, b.oracle_instance);
  EXPECT_EQ(a.oracle_instance, c.oracle_instance);
  EXPECT_EQ(a.oracle_corrupt.aggregate, c.oracle_corrupt.aggregate);
  EXPECT_EQ(a.oracle_corrupt.choice, c.oracle_corrupt.choice);
  EXPECT_EQ(a.best_fixed.model, c.best_fixed.model);
}

TEST(Oracle, ModelsOrderNumericallyThenByName) {
  ScoreTable t;
  for (const char* m : {"16", "gara", "2", "1", "unified2"}) t.add(row(0, "contrast", 1, m, 0.5));
  EXPECT_EQ(t.models(), (std::vector<std::string>{"1", "2", "16", "gara", "unified2"}));
}

TEST(Oracle, IncompleteGridIsDataError) {
  ScoreTable t = two_by_two();
  t.add(row(2, "gaussian_noise", 1, "1", 0.4));  // no rank-2 score for image 2
  EXPECT_THROW((void)oracle_corrupt(t), DataError);
  EXPECT_THROW((void)oracle_instance(t), DataError);
  EXPECT_THROW((void)best_fixed(t), DataError);
}

TEST(Oracle, DuplicateCellOrBadScoreIsDataError) {
  ScoreTable dup = two_by_two();
  dup.add(row(0, "gaussian_noise", 1, "1", 0.4));
  EXPECT_THROW((void)oracle_instance(dup), DataError);
  ScoreTable bad;
  bad.add(row(0, "contrast", 1, "1", 1.5));
  EXPECT_THROW((void)oracle_instance(bad), DataError);
  EXPECT_THROW((void)oracle_instance(ScoreTable{}), DataError);
}

TEST(Oracle, ExactSummationIsOrderFree) {
  std::vector<double> xs{1e16, 1.0, -1e16, 1.0, 1e-3};
  EXPECT_EQ(exact_sum(xs), 2.001);
  std::reverse(xs.begin(), xs.end());
  EXPECT_EQ(exact_sum(xs), 2.001);
}

// ---- CSV ----

TEST(ScoreCsv, RoundTripIsExact) {
  SeededRng rng(4);
  const ScoreTable t = random_table(rng, 3, 2, 4);
  const std::string csv = t.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kScoreHeader);
  const ScoreTable back = ScoreTable::from_csv(csv);
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back.rows()[i].iou, t.rows()[i].iou);
    EXPECT_EQ(back.rows()[i].dice, t.rows()[i].dice);
    EXPECT_EQ(back.rows()[i].rank_or_model, t.rows()[i].rank_or_model);
  }
  EXPECT_EQ(back.to_csv(), csv);
}

TEST(ScoreCsv, MalformedInputIsDataError) {
  EXPECT_THROW((void)ScoreTable::from_csv("wrong,header\n"), DataError);
  const std::string head = std::string(kScoreHeader) + "\n";
  EXPECT_THROW((void)ScoreTable::from_csv(head + "0,contrast,1,4,0.5\n"), DataError);
  EXPECT_THROW((void)ScoreTable::from_csv(head + "x,contrast,1,4,0.5,0.6\n"), DataError);
  EXPECT_THROW((void)ScoreTable::from_csv(head + "0,contrast,1,4,abc,0.6\n"), DataError);
}

// ---- gate telemetry ----

TEST(GateReport, HammingOfExample) {
  const std::vector<std::uint8_t> a{1, 0, 1, 0}, b{1, 1, 0, 0};
  EXPECT_EQ(hamming(a, b), 2u);
  const std::vector<GateRecord> recs{record("contrast", 0, Space::Higher, a), record("contrast", 0, Space::Higher, b)};
  const GateReport rep = gate_report(recs);
  EXPECT_EQ(recs[0].decision.effective_rank, 2u);
  EXPECT_EQ(rep.same_rank.pairs, 1u);
  EXPECT_EQ(rep.same_rank.distinct_pairs, 1u);
  EXPECT_EQ(rep.same_rank.max_distance, 2u);
  EXPECT_EQ(rep.same_rank.mean_distance, 2.0);
  EXPECT_THROW((void)hamming(a, std::vector<std::uint8_t>{1, 0}), ShapeError);
}

TEST(GateReport, IdenticalDecisionsHaveZeroDistance) {
  std::vector<GateRecord> recs;
  for (int i = 0; i < 5; ++i) recs.push_back(record("box_blur", 1, Space::Lower, {1, 1}));
  const GateReport rep = gate_report(recs);
  EXPECT_EQ(rep.same_rank.pairs, 10u);
  EXPECT_EQ(rep.same_rank.max_distance, 0u);
  EXPECT_EQ(rep.same_rank.distinct_pairs, 0u);
}

TEST(GateReport, FrequenciesPerCorruption) {
  const std::vector<GateRecord> recs{
      record("contrast", 0, Space::Lower, {1, 0}),
      record("contrast", 0, Space::Higher, {1, 0, 1, 1}),
      record("contrast", 1, Space::Higher, {0, 0, 1, 1}),
      record("brightness", 0, Space::Lower, {0, 1}),
  };
  const GateReport rep = gate_report(recs);
  ASSERT_EQ(rep.per_corruption.size(), 2u);
  const auto& b = rep.per_corruption[0];
  const auto& c = rep.per_corruption[1];
  EXPECT_EQ(b.corruption, "brightness");
  EXPECT_EQ(c.corruption, "contrast");
  EXPECT_EQ(c.decisions, 3u);
  EXPECT_DOUBLE_EQ(c.higher_frequency, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(c.mean_effective_rank, 2.0);
  EXPECT_EQ(c.higher_activation, (std::vector<double>{0.5, 0.0, 1.0, 1.0}));
  EXPECT_EQ(c.lower_activation, (std::vector<double>{1.0, 0.0}));
  for (const auto& s : rep.per_corruption) {
    for (double v : s.lower_activation) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
    for (double v : s.higher_activation) EXPECT_TRUE(v >= 0.0 && v <= 1.0);
  }
  // Only the two slot-0 lower-space rank-1 decisions are compared, across corruptions.
  EXPECT_EQ(rep.same_rank.pairs, 1u);
  EXPECT_EQ(rep.same_rank.max_distance, 2u);
  EXPECT_THROW((void)gate_report(std::vector<GateRecord>{}), UsageError);
}

TEST(GateReport, TelemetryCsvRows) {
  const std::vector<GateRecord> recs{record("salt_pepper", 0, Space::Lower, {1, 0}),
                                     record("clean", 3, Space::Higher, {0, 1, 1})};
  EXPECT_EQ(telemetry_csv(recs), std::string(kTelemetryHeader) + "\nsalt_pepper,0,1,10\nclean,1,2,011\n");
}

// ---- sweeps ----

TEST(Sweep, RunSeedDependsOnLabelOnly) {
  EXPECT_EQ(run_seed(0, "gara"), run_seed(0, "gara"));
  EXPECT_NE(run_seed(0, "gara"), run_seed(0, "4"));
  EXPECT_NE(run_seed(0, "gara"), run_seed(1, "gara"));
}

TEST(Sweep, SingleRankGivesOneModel) {
  const ScoreTable t = rank_sweep({2}, tiny_context());
  EXPECT_EQ(t.models(), std::vector<std::string>{"2"});
  EXPECT_EQ(t.size(), tiny().test.size());
}

TEST(Sweep, IdenticalSeedsGiveIdenticalTablesInParallel) {
  SweepContext serial = tiny_context();
  SweepContext par = serial;
  par.parallel = 3;
  const std::string a = rank_sweep({1, 2, 4}, serial).to_csv();
  EXPECT_EQ(rank_sweep({1, 2, 4}, serial).to_csv(), a);
  EXPECT_EQ(rank_sweep({1, 2, 4}, par).to_csv(), a);
  // A run's result does not depend on which other runs share the sweep.
  const ScoreTable alone = rank_sweep({4}, serial);
  const ScoreTable all = ScoreTable::from_csv(a);
  std::string four;
  for (const auto& r : all.rows())
    if (r.rank_or_model == "4") four += format_real(r.iou) + ";";
  std::string solo;
  for (const auto& r : alone.rows()) solo += format_real(r.iou) + ";";
  EXPECT_EQ(solo, four);
}

TEST(Sweep, RankErrorsAreConfigErrors) {
  EXPECT_THROW((void)rank_sweep({17}, tiny_context()), ConfigError);
  EXPECT_THROW((void)rank_sweep({0}, tiny_context()), ConfigError);
  EXPECT_THROW((void)rank_sweep({2, 2}, tiny_context()), ConfigError);
  EXPECT_THROW((void)rank_sweep({}, tiny_context()), ConfigError);
  EXPECT_THROW((void)rank_sweep({1}, SweepContext{}), UsageError);
}

TEST(Sweep, TemperatureSweep) {
  EXPECT_THROW((void)temperature_sweep({0.5, 0.0}, tiny_context()), ConfigError);
  EXPECT_THROW((void)temperature_sweep({-1.0}, tiny_context()), ConfigError);
  EXPECT_THROW((void)temperature_sweep({}, tiny_context()), ConfigError);
  const TauSweep a = temperature_sweep({0.5, 2.0, 0.5}, tiny_context());
  ASSERT_EQ(a.points.size(), 3u);
  EXPECT_EQ(a.points[0].tau, 0.5);
  EXPECT_EQ(a.points[0].degraded_iou, a.points[2].degraded_iou);
  const auto [lo, hi] = std::minmax({a.points[0].degraded_iou, a.points[1].degraded_iou});
  EXPECT_EQ(a.spread(), hi - lo);
}

// ---- parameter counting ----

TEST(ParamCount, GaraToyDefaults) {
  BackboneConfig b;
  const Model m = build_model(ToyBackbone(b), AdapterSpec{}, 0);
  const ParamCount c = count_params(m);
  EXPECT_EQ(c.slots, 3 * b.blocks);
  EXPECT_EQ(c.total, c.per_slot * c.slots);
  EXPECT_EQ(c.total, m.adapter_param_total());
  const std::size_t d = b.dim;
  EXPECT_GE(c.per_slot, (2 + 16) * 2 * d);  // rank-1 pairs of both spaces, plus gates
}
