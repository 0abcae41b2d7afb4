#include "densedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace densedit::metrics {
namespace {

constexpr std::size_t kChunk = 1024;

struct DepthSums {
  double abs_rel = 0, sq_rel = 0, sq = 0, sq_log = 0;
  std::int64_t d1 = 0, d2 = 0, d3 = 0, n = 0;
};

double ratio(std::int64_t num, std::int64_t den) { return static_cast<double>(num) / static_cast<double>(den); }

std::vector<std::uint8_t> dilate(const DenseLabel& m, int radius) {
  std::vector<std::uint8_t> out(m.data.size(), 0);
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (m.at(y, x) == 0.0) continue;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > radius * radius) continue;
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || xx < 0 || yy >= m.height || xx >= m.width) continue;
          out[static_cast<std::size_t>(yy) * m.width + xx] = 1;
        }
      }
    }
  }
  return out;
}

void require_same_shape(const DenseLabel& a, const DenseLabel& b) {
  if (a.height != b.height || a.width != b.width) {
    throw Error("shape mismatch: " + std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                std::to_string(b.height) + "x" + std::to_string(b.width));
  }
}

}  // namespace

DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const std::uint8_t> valid, double label_span) {
  if (pred.size() != gt.size()) throw Error("depth_metrics: prediction and ground truth sizes differ");
  if (!valid.empty() && valid.size() != gt.size()) throw Error("depth_metrics: valid mask size differs");
  if (!(label_span > 0.0)) throw Error("depth_metrics: label span must be positive");

  const std::size_t chunks = (gt.size() + kChunk - 1) / kChunk;
  std::vector<DepthSums> partial(chunks);
  bool bad_value = false;
#pragma omp parallel for schedule(static) reduction(|| : bad_value)
  for (std::size_t c = 0; c < chunks; ++c) {
    DepthSums s;
    const std::size_t end = std::min(gt.size(), (c + 1) * kChunk);
    for (std::size_t i = c * kChunk; i < end; ++i) {
      if (!valid.empty() && valid[i] == 0) continue;
      const double p = pred[i], g = gt[i];
      if (!(p > 0.0) || !(g > 0.0)) {
        bad_value = true;
        continue;
      }
      const double diff = p - g;
      s.abs_rel += std::abs(diff) / g;
      s.sq_rel += diff * diff / g;
      s.sq += diff * diff;
      const double ld = std::log(p) - std::log(g);
      s.sq_log += ld * ld;
      const double r = std::max(p / g, g / p);
      s.d1 += r < 1.25;
      s.d2 += r < 1.25 * 1.25;
      s.d3 += r < 1.25 * 1.25 * 1.25;
      ++s.n;
    }
    partial[c] = s;
  }
  if (bad_value) throw Error("depth_metrics: non-positive depth on a valid pixel");

  DepthSums t;
  for (const DepthSums& s : partial) {
    t.abs_rel += s.abs_rel;
    t.sq_rel += s.sq_rel;
    t.sq += s.sq;
    t.sq_log += s.sq_log;
    t.d1 += s.d1;
    t.d2 += s.d2;
    t.d3 += s.d3;
    t.n += s.n;
  }
  if (t.n == 0) throw Error("depth_metrics: no valid pixels");

  const double n = static_cast<double>(t.n);
  DepthMetrics m;
  m.abs_rel = t.abs_rel / n;
  m.sq_rel = t.sq_rel / n;
  m.rmse = std::sqrt(t.sq / n);
  m.rmse_norm = m.rmse / label_span;
  m.rmse_log = std::sqrt(t.sq_log / n);
  m.delta1 = ratio(t.d1, t.n);
  m.delta2 = ratio(t.d2, t.n);
  m.delta3 = ratio(t.d3, t.n);
  return m;
}

DepthMetrics depth_metrics(const DenseLabel& pred, const DenseLabel& gt) {
  require_same_shape(pred, gt);
  const double span = gt.range ? gt.range->r_max - gt.range->r_min : 1.0;
  return depth_metrics(pred.data, gt.data, {}, span);
}

double d_score(const DepthMetrics& m) {
  const double terms = 1.0 / (1.0 + m.abs_rel) + 1.0 / (1.0 + m.sq_rel) + 1.0 / (1.0 + m.rmse_norm) +
                       1.0 / (1.0 + m.rmse_log) + m.delta1;
  return terms / 5.0;
}

SegCounts seg_counts(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) throw Error("seg_counts: shape mismatch");
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  const std::int64_t n = static_cast<std::int64_t>(gt.size());
#pragma omp parallel for schedule(static) reduction(+ : tp, fp, fn, tn)
  for (std::int64_t i = 0; i < n; ++i) {
    const bool p = pred[i] != 0.0, g = gt[i] != 0.0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
    tn += !p && !g;
  }
  return {tp, fp, fn, tn};
}

SegMetrics seg_metrics_from_counts(const SegCounts& c) {
  SegMetrics m;
  const std::int64_t total = c.tp + c.fp + c.fn + c.tn;
  m.pa = total == 0 ? 1.0 : ratio(c.tp + c.tn, total);
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  if (both_empty) {
    m.iou = m.dice = m.precision = m.recall = m.f1 = m.ciou = 1.0;
    return m;
  }
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn);
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
  m.precision = c.tp + c.fp == 0 ? 0.0 : ratio(c.tp, c.tp + c.fp);
  m.recall = c.tp + c.fn == 0 ? 0.0 : ratio(c.tp, c.tp + c.fn);
  m.f1 = m.precision + m.recall == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  m.ciou = m.iou;
  return m;
}

double tolerance_iou(const DenseLabel& pred, const DenseLabel& gt, int radius) {
  require_same_shape(pred, gt);
  if (radius < 0) throw Error("tolerance_iou: negative radius");
  const std::vector<std::uint8_t> gt_zone = dilate(gt, radius);
  const std::vector<std::uint8_t> pred_zone = dilate(pred, radius);
  std::int64_t pred_hit = 0, pred_miss = 0, gt_hit = 0, gt_miss = 0;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (pred.data[i] != 0.0) (gt_zone[i] ? pred_hit : pred_miss)++;
    if (gt.data[i] != 0.0) (pred_zone[i] ? gt_hit : gt_miss)++;
  }
  if (pred_hit + pred_miss + gt_hit + gt_miss == 0) return 1.0;
  const double tp = 0.5 * static_cast<double>(pred_hit + gt_hit);
  return tp / (tp + static_cast<double>(pred_miss + gt_miss));
}

SegMetrics seg_metrics(const DenseLabel& pred, const DenseLabel& gt, int ciou_radius) {
  require_same_shape(pred, gt);
  SegMetrics m = seg_metrics_from_counts(seg_counts(pred.data, gt.data));
  m.ciou = tolerance_iou(pred, gt, ciou_radius);
  return m;
}

double s_score(const SegMetrics& m) { return (m.iou + m.pa + m.dice) / 3.0; }

MetricReport evaluate_task(const std::string& task_id, LabelKind kind, const std::vector<DenseLabel>& predictions,
                           const std::vector<DenseLabel>& ground_truth, const std::optional<LabelRange>& range,
                           const EvaluateOptions& options) {
  if (predictions.size() != ground_truth.size()) throw Error("evaluate_task: prediction/label count mismatch");
  if (predictions.empty()) throw Error("evaluate_task: nothing to evaluate for task '" + task_id + "'");
  if (kind == LabelKind::regression && !range) throw Error("evaluate_task: regression task without range");

  const std::size_t n = predictions.size();
  MetricReport report{task_id, kind, n, {}, 0.0};
  if (kind == LabelKind::regression) {
    std::vector<DepthMetrics> per(n);
    for (std::size_t i = 0; i < n; ++i) {
      DenseLabel gt = ground_truth[i];
      gt.range = range;
      const DenseLabel pred = resize_bilinear(predictions[i], gt.height, gt.width);
      per[i] = depth_metrics(pred, gt);
    }
    DepthMetrics mean;
    for (const DepthMetrics& m : per) {
      mean.abs_rel += m.abs_rel;
      mean.sq_rel += m.sq_rel;
      mean.rmse += m.rmse;
      mean.rmse_norm += m.rmse_norm;
      mean.rmse_log += m.rmse_log;
      mean.delta1 += m.delta1;
      mean.delta2 += m.delta2;
      mean.delta3 += m.delta3;
    }
    const double dn = static_cast<double>(n);
    for (double* f : {&mean.abs_rel, &mean.sq_rel, &mean.rmse, &mean.rmse_norm, &mean.rmse_log, &mean.delta1,
                      &mean.delta2, &mean.delta3}) {
      *f /= dn;
    }
    report.values = mean;
    report.score = d_score(mean);
  } else {
    std::vector<SegMetrics> per(n);
    for (std::size_t i = 0; i < n; ++i) {
      const DenseLabel pred = resize_nearest(predictions[i], ground_truth[i].height, ground_truth[i].width);
      per[i] = seg_metrics(pred, ground_truth[i], options.ciou_radius);
    }
    SegMetrics mean;
    for (const SegMetrics& m : per) {
      mean.iou += m.iou;
      mean.pa += m.pa;
      mean.dice += m.dice;
      mean.precision += m.precision;
      mean.recall += m.recall;
      mean.f1 += m.f1;
      mean.ciou += m.ciou;
    }
    const double dn = static_cast<double>(n);
    for (double* f : {&mean.iou, &mean.pa, &mean.dice, &mean.precision, &mean.recall, &mean.f1, &mean.ciou}) {
      *f /= dn;
    }
    report.values = mean;
    report.score = s_score(mean);
  }
  return report;
}

AggregateSummary aggregate(const std::vector<MetricReport>& reports,
                           const std::map<std::string, std::string>& category_of) {
  if (reports.empty()) throw Error("aggregate: no reports");
  AggregateSummary out;
  double d_total = 0.0, s_total = 0.0;
  std::size_t d_n = 0, s_n = 0;
  std::map<std::string, std::map<std::string, double>> sums;
  for (const MetricReport& r : reports) {
    const auto it = category_of.find(r.task_id);
    const std::string category = it == category_of.end() ? "uncategorized" : it->second;
    const std::string pop = r.kind == LabelKind::regression ? "D" : "S";
    sums[category][pop] += r.score;
    out.categories[category][pop].tasks += 1;
    if (r.kind == LabelKind::regression) {
      d_total += r.score;
      ++d_n;
    } else {
      s_total += r.score;
      ++s_n;
    }
  }
  for (auto& [category, pops] : out.categories) {
    for (auto& [pop, summary] : pops) summary.mean = sums[category][pop] / static_cast<double>(summary.tasks);
  }
  if (d_n) out.overall_d = PopulationSummary{d_total / static_cast<double>(d_n), d_n};
  if (s_n) out.overall_s = PopulationSummary{s_total / static_cast<double>(s_n), s_n};
  return out;
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json metrics;
  if (const auto* d = std::get_if<DepthMetrics>(&r.values)) {
    metrics = {{"abs_rel", d->abs_rel}, {"sq_rel", d->sq_rel},   {"rmse", d->rmse},     {"rmse_norm", d->rmse_norm},
               {"rmse_log", d->rmse_log}, {"delta1", d->delta1}, {"delta2", d->delta2}, {"delta3", d->delta3}};
  } else {
    const auto& s = std::get<SegMetrics>(r.values);
    metrics = {{"iou", s.iou},           {"pa", s.pa},         {"dice", s.dice}, {"precision", s.precision},
               {"recall", s.recall},     {"f1", s.f1},         {"ciou", s.ciou}};
  }
  return {{"task_id", r.task_id}, {"kind", to_string(r.kind)}, {"n", r.sample_count},
          {"metrics", metrics},   {"score", r.score}};
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  r.task_id = j.at("task_id").get<std::string>();
  r.kind = label_kind_from_string(j.at("kind").get<std::string>());
  r.sample_count = j.at("n").get<std::size_t>();
  r.score = j.at("score").get<double>();
  const auto& m = j.at("metrics");
  if (r.kind == LabelKind::regression) {
    DepthMetrics d;
    d.abs_rel = m.at("abs_rel");
    d.sq_rel = m.at("sq_rel");
    d.rmse = m.at("rmse");
    d.rmse_norm = m.at("rmse_norm");
    d.rmse_log = m.at("rmse_log");
    d.delta1 = m.at("delta1");
    d.delta2 = m.at("delta2");
    d.delta3 = m.at("delta3");
    r.values = d;
  } else {
    SegMetrics s;
    s.iou = m.at("iou");
    s.pa = m.at("pa");
    s.dice = m.at("dice");
    s.precision = m.at("precision");
    s.recall = m.at("recall");
    s.f1 = m.at("f1");
    s.ciou = m.at("ciou");
    r.values = s;
  }
  return r;
}

nlohmann::json to_json(const AggregateSummary& s) {
  nlohmann::json cats = nlohmann::json::object();
  for (const auto& [category, pops] : s.categories) {
    for (const auto& [pop, summary] : pops) cats[category][pop] = {{"mean", summary.mean}, {"tasks", summary.tasks}};
  }
  nlohmann::json j = {{"categories", cats}};
  j["overall_d"] = s.overall_d ? nlohmann::json{{"mean", s.overall_d->mean}, {"tasks", s.overall_d->tasks}}
                               : nlohmann::json(nullptr);
  j["overall_s"] = s.overall_s ? nlohmann::json{{"mean", s.overall_s->mean}, {"tasks", s.overall_s->tasks}}
                               : nlohmann::json(nullptr);
  return j;
}

std::string reports_to_csv(const std::vector<MetricReport>& reports) {
  static const char* kColumns[] = {"abs_rel", "sq_rel", "rmse", "rmse_norm", "rmse_log", "delta1", "delta2",
                                   "delta3",  "iou",    "pa",   "dice",      "precision", "recall", "f1",
                                   "ciou"};
  std::ostringstream os;
  os.precision(10);
  os << "task_id,kind,n,score";
  for (const char* c : kColumns) os << ',' << c;
  os << '\n';
  for (const MetricReport& r : reports) {
    const nlohmann::json m = to_json(r).at("metrics");
    os << r.task_id << ',' << to_string(r.kind) << ',' << r.sample_count << ',' << r.score;
    for (const char* c : kColumns) {
      os << ',';
      if (m.contains(c)) os << m.at(c).get<double>();
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace densedit::metrics
