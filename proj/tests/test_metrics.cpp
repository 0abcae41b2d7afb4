#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "densedit/metrics.hpp"
#include "oracles/oracles.hpp"

namespace densedit::metrics {
namespace {

DenseLabel mask(int h, int w, std::vector<double> v) { return make_mask_label(h, w, std::move(v)); }

TEST(DepthMetrics, PerfectPrediction) {
  const std::vector<double> g{1.0, 2.5, 7.0};
  const DepthMetrics m = depth_metrics(g, g);
  EXPECT_EQ(m.abs_rel, 0.0);
  EXPECT_EQ(m.sq_rel, 0.0);
  EXPECT_EQ(m.rmse, 0.0);
  EXPECT_EQ(m.rmse_log, 0.0);
  EXPECT_EQ(m.delta1, 1.0);
  EXPECT_EQ(m.delta2, 1.0);
  EXPECT_EQ(m.delta3, 1.0);
  EXPECT_DOUBLE_EQ(d_score(m), 1.0);
}

TEST(DepthMetrics, HandExamples) {
  const std::vector<double> g{1, 2, 4}, p{1.1, 1.8, 4.4};
  EXPECT_NEAR(depth_metrics(p, g).abs_rel, 0.1, 1e-12);

  const std::vector<double> g2{1, 1}, p2{1.3, 1.0};
  const DepthMetrics m = depth_metrics(p2, g2);
  EXPECT_EQ(m.delta1, 0.5);
  EXPECT_EQ(m.delta2, 1.0);
}

TEST(DepthMetrics, ValidMaskAndErrors) {
  const std::vector<double> g{1, 2, 4}, p{1, 2, 40};
  const std::vector<std::uint8_t> valid{1, 1, 0};
  EXPECT_EQ(depth_metrics(p, g, valid).abs_rel, 0.0);

  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(depth_metrics(p, g, none), Error);
  const std::vector<double> bad{1, 0, 4};
  EXPECT_THROW(depth_metrics(bad, g), Error);
  EXPECT_THROW(depth_metrics(p, bad), Error);
  // invalid pixels may hold anything
  const std::vector<std::uint8_t> skip_bad{1, 0, 1};
  EXPECT_NO_THROW(depth_metrics(bad, g, skip_bad));
}

TEST(DepthMetrics, MatchesOracleOnRandomMaps) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> u(0.1, 10.0);
  std::bernoulli_distribution keep(0.8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    std::vector<double> p(n), g(n);
    std::vector<std::uint8_t> valid(n);
    std::vector<unsigned char> ovalid(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = u(rng);
      g[i] = u(rng);
      valid[i] = ovalid[i] = keep(rng) || i == 0;
    }
    const DepthMetrics m = depth_metrics(p, g, valid);
    const oracle::Depth o = oracle::depth(p, g, ovalid);
    auto rel = [](double a, double b) { return std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(b)); };
    EXPECT_TRUE(rel(m.abs_rel, o.abs_rel));
    EXPECT_TRUE(rel(m.sq_rel, o.sq_rel));
    EXPECT_TRUE(rel(m.rmse, o.rmse));
    EXPECT_TRUE(rel(m.rmse_log, o.rmse_log));
    EXPECT_EQ(m.delta1, o.delta1);
    EXPECT_EQ(m.delta2, o.delta2);
    EXPECT_EQ(m.delta3, o.delta3);
    EXPECT_LE(m.delta1, m.delta2);
    EXPECT_LE(m.delta2, m.delta3);
  }
}

TEST(DepthMetrics, NormalizedRmseUsesLabelSpan) {
  const DenseLabel g = make_regression_label(1, 2, {10, 20}, {0, 80});
  const DenseLabel p = make_regression_label(1, 2, {18, 20}, {0, 80});
  const DepthMetrics m = depth_metrics(p, g);
  EXPECT_DOUBLE_EQ(m.rmse, std::sqrt(32.0));
  EXPECT_DOUBLE_EQ(m.rmse_norm, std::sqrt(32.0) / 80);
}

TEST(DScore, FormulaAndMonotonicity) {
  DepthMetrics m;
  m.abs_rel = m.sq_rel = m.rmse_norm = m.rmse_log = 1.0;
  m.delta1 = 0.0;
  EXPECT_DOUBLE_EQ(d_score(m), 0.4);

  DepthMetrics base;
  base.abs_rel = 0.2;
  base.sq_rel = 0.3;
  base.rmse_norm = 0.1;
  base.rmse_log = 0.25;
  base.delta1 = 0.7;
  const double s0 = d_score(base);
  for (double DepthMetrics::*f : {&DepthMetrics::abs_rel, &DepthMetrics::sq_rel, &DepthMetrics::rmse_norm,
                                  &DepthMetrics::rmse_log}) {
    DepthMetrics worse = base;
    worse.*f += 0.05;
    EXPECT_LT(d_score(worse), s0);
  }
  DepthMetrics better = base;
  better.delta1 = 0.8;
  EXPECT_GT(d_score(better), s0);

  DepthMetrics extreme;
  extreme.abs_rel = extreme.sq_rel = extreme.rmse_norm = extreme.rmse_log = 1e9;
  EXPECT_GE(d_score(extreme), 0.0);
  EXPECT_LE(d_score(extreme), 1.0);
}

TEST(SegMetrics, HandCountedTwoByTwo) {
  const DenseLabel gt = mask(2, 2, {1, 1, 0, 0});
  const DenseLabel pred = mask(2, 2, {1, 0, 1, 0});
  EXPECT_EQ(seg_counts(pred.data, gt.data), (SegCounts{1, 1, 1, 1}));
  const SegMetrics m = seg_metrics(pred, gt);
  EXPECT_DOUBLE_EQ(m.iou, 1.0 / 3);
  EXPECT_DOUBLE_EQ(m.pa, 0.5);
  EXPECT_DOUBLE_EQ(m.dice, 0.5);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 0.5);
  EXPECT_DOUBLE_EQ(m.f1, 0.5);
}

TEST(SegMetrics, IdenticalDisjointAndEmpty) {
  const DenseLabel a = mask(2, 3, {1, 0, 1, 0, 0, 1});
  const SegMetrics same = seg_metrics(a, a);
  EXPECT_EQ(same.iou, 1.0);
  EXPECT_EQ(same.pa, 1.0);
  EXPECT_EQ(same.dice, 1.0);
  EXPECT_EQ(s_score(same), 1.0);

  const DenseLabel b = mask(2, 3, {0, 1, 0, 1, 0, 0});
  const SegMetrics disjoint = seg_metrics(a, b);
  EXPECT_EQ(disjoint.iou, 0.0);
  EXPECT_EQ(disjoint.dice, 0.0);

  const DenseLabel empty = mask(2, 3, {0, 0, 0, 0, 0, 0});
  const SegMetrics ee = seg_metrics(empty, empty);
  EXPECT_EQ(ee.iou, 1.0);
  EXPECT_EQ(ee.dice, 1.0);
  EXPECT_EQ(ee.precision, 1.0);
  EXPECT_EQ(ee.recall, 1.0);
  EXPECT_EQ(ee.f1, 1.0);
  EXPECT_EQ(seg_metrics(empty, a).iou, 0.0);
  EXPECT_EQ(seg_metrics(a, empty).iou, 0.0);

  EXPECT_THROW(seg_metrics(a, mask(3, 2, {0, 0, 0, 0, 0, 0})), Error);
}

void check_against_oracle(const std::vector<double>& p, const std::vector<double>& g) {
  const SegCounts c = seg_counts(p, g);
  const oracle::Counts o = oracle::seg_counts(p, g);
  ASSERT_EQ(c.tp, o.tp);
  ASSERT_EQ(c.fp, o.fp);
  ASSERT_EQ(c.fn, o.fn);
  ASSERT_EQ(c.tn, o.tn);
}

TEST(SegMetrics, MatchesOracleExhaustivelyOnSmallMasks) {
  // every pair of 2x2 masks and every pair of 1x3 masks
  for (int n : {3, 4}) {
    for (int a = 0; a < (1 << n); ++a) {
      for (int b = 0; b < (1 << n); ++b) {
        std::vector<double> p(n), g(n);
        for (int i = 0; i < n; ++i) {
          p[i] = (a >> i) & 1;
          g[i] = (b >> i) & 1;
        }
        check_against_oracle(p, g);
      }
    }
  }
}

TEST(SegMetrics, PropertiesOnRandomMasks) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const int h = 1 + static_cast<int>(rng() % 8), w = 1 + static_cast<int>(rng() % 8);
    std::bernoulli_distribution fg(0.1 + 0.8 * (trial % 10) / 10.0);
    std::vector<double> p(h * w), g(h * w);
    for (auto& v : p) v = fg(rng);
    for (auto& v : g) v = fg(rng);
    check_against_oracle(p, g);

    const DenseLabel a = mask(h, w, p), b = mask(h, w, g);
    const SegMetrics ab = seg_metrics(a, b), ba = seg_metrics(b, a);
    EXPECT_EQ(ab.iou, ba.iou);
    EXPECT_EQ(ab.dice, ba.dice);
    EXPECT_EQ(ab.precision, ba.recall);
    EXPECT_NEAR(ab.dice, 2 * ab.iou / (1 + ab.iou), 1e-12);
    for (double v : {ab.iou, ab.pa, ab.dice, ab.precision, ab.recall, ab.f1, ab.ciou}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    EXPECT_GE(ab.ciou, ab.iou);
  }
}

TEST(SegMetrics, ToleranceIou) {
  const DenseLabel gt = mask(1, 6, {0, 1, 1, 0, 0, 0});
  const DenseLabel shifted = mask(1, 6, {0, 0, 1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(tolerance_iou(shifted, gt, 0), seg_metrics(shifted, gt).iou);
  EXPECT_DOUBLE_EQ(tolerance_iou(shifted, gt, 1), 1.0);
  const DenseLabel far = mask(1, 6, {0, 0, 0, 0, 0, 1});
  EXPECT_EQ(tolerance_iou(far, gt, 1), 0.0);
}

TEST(SScore, PublishedAblationRows) {
  SegMetrics m;
  m.iou = 0.822;
  m.pa = 0.926;
  m.dice = 0.880;
  EXPECT_NEAR(s_score(m), 0.876, 0.0005);
  m.iou = 0.934;
  m.pa = 0.971;
  m.dice = 0.964;
  EXPECT_NEAR(s_score(m), 0.956, 0.0005);
}

MetricReport seg_report(const std::string& id, double score) {
  MetricReport r;
  r.task_id = id;
  r.kind = LabelKind::binary_mask;
  r.sample_count = 1;
  r.values = SegMetrics{};
  r.score = score;
  return r;
}

TEST(Aggregate, Means) {
  const AggregateSummary one = aggregate({seg_report("a", 0.37)}, {{"a", "smart_city"}});
  EXPECT_DOUBLE_EQ(one.categories.at("smart_city").at("S").mean, 0.37);
  EXPECT_DOUBLE_EQ(one.overall_s->mean, 0.37);
  EXPECT_FALSE(one.overall_d.has_value());

  const AggregateSummary two =
      aggregate({seg_report("a", 0.2), seg_report("b", 0.8)}, {{"a", "safety_ctrl"}, {"b", "safety_ctrl"}});
  EXPECT_DOUBLE_EQ(two.categories.at("safety_ctrl").at("S").mean, 0.5);
  EXPECT_EQ(two.categories.at("safety_ctrl").at("S").tasks, 2u);

  MetricReport d;
  d.task_id = "depth";
  d.kind = LabelKind::regression;
  d.values = DepthMetrics{};
  d.score = 0.9;
  const AggregateSummary mixed = aggregate({seg_report("a", 0.2), d}, {});
  EXPECT_DOUBLE_EQ(mixed.overall_d->mean, 0.9);
  EXPECT_DOUBLE_EQ(mixed.overall_s->mean, 0.2);
  EXPECT_TRUE(mixed.categories.count("uncategorized"));

  EXPECT_THROW(aggregate({}, {}), Error);
}

TEST(Aggregate, SamFireAlertRow) {
  SegMetrics m;
  m.iou = 0.528;
  m.pa = 0.591;
  m.dice = 0.574;
  EXPECT_NEAR(s_score(m), 0.564, 0.0005);
}

TEST(EvaluateTask, AveragesSamplesAndResizes) {
  const DenseLabel gt = mask(2, 2, {1, 1, 0, 0});
  const DenseLabel small = mask(1, 1, {1});
  const MetricReport r = evaluate_task("t", LabelKind::binary_mask, {gt, small}, {gt, gt}, std::nullopt);
  EXPECT_EQ(r.sample_count, 2u);
  const auto& m = std::get<SegMetrics>(r.values);
  // second prediction upsamples to all foreground: iou 0.5, pa 0.5, dice 2/3
  EXPECT_DOUBLE_EQ(m.iou, 0.75);
  EXPECT_DOUBLE_EQ(m.pa, 0.75);
  EXPECT_DOUBLE_EQ(m.dice, (1.0 + 2.0 / 3) / 2);
  EXPECT_DOUBLE_EQ(r.score, s_score(m));

  EXPECT_THROW(evaluate_task("t", LabelKind::binary_mask, {gt}, {gt, gt}, std::nullopt), Error);
}

TEST(EvaluateTask, JsonRoundTrip) {
  const DenseLabel g = make_regression_label(1, 3, {1, 2, 3}, {0, 4});
  const DenseLabel p = make_regression_label(1, 3, {1.5, 2, 2.5}, {0, 4});
  const MetricReport r = evaluate_task("d", LabelKind::regression, {p}, {g}, LabelRange{0, 4});
  const MetricReport back = report_from_json(to_json(r));
  EXPECT_EQ(back.task_id, "d");
  EXPECT_EQ(back.kind, LabelKind::regression);
  EXPECT_DOUBLE_EQ(back.score, r.score);
  EXPECT_DOUBLE_EQ(std::get<DepthMetrics>(back.values).rmse, std::get<DepthMetrics>(r.values).rmse);
  EXPECT_NE(reports_to_csv({r}).find("d,"), std::string::npos);
}

}  // namespace
}  // namespace densedit::metrics
