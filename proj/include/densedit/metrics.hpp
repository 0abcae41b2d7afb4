#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "densedit/task_codec.hpp"

namespace densedit::metrics {

struct DepthMetrics {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  /// RMSE divided by the label span (r_max - r_min); used by d_score.
  double rmse_norm = 0.0;
  double rmse_log = 0.0;
  double delta1 = 0.0;
  double delta2 = 0.0;
  double delta3 = 0.0;
};

struct SegCounts {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  std::int64_t tn = 0;
  bool operator==(const SegCounts&) const = default;
};

struct SegMetrics {
  double iou = 0.0;
  double pa = 0.0;
  double dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double ciou = 0.0;
};

/// Standard monocular-depth metrics over pixels where `valid` is nonzero.
/// An empty `valid` span means every pixel is valid. Throws on an empty valid
/// set or non-positive values on valid pixels.
DepthMetrics depth_metrics(std::span<const double> pred, std::span<const double> gt,
                           std::span<const std::uint8_t> valid = {}, double label_span = 1.0);
DepthMetrics depth_metrics(const DenseLabel& pred, const DenseLabel& gt);

/// mean(1/(1+abs_rel), 1/(1+sq_rel), 1/(1+rmse_norm), 1/(1+rmse_log), delta1)
double d_score(const DepthMetrics& m);

SegCounts seg_counts(std::span<const double> pred, std::span<const double> gt);
/// Metrics from confusion counts; ciou is left at the plain IoU.
SegMetrics seg_metrics_from_counts(const SegCounts& c);

constexpr int kDefaultCiouRadius = 2;

/// Tolerance IoU: a predicted pixel within `radius` of ground-truth foreground
/// counts as correct, and a ground-truth pixel within `radius` of predicted
/// foreground counts as found. Reduces to IoU at radius 0.
double tolerance_iou(const DenseLabel& pred, const DenseLabel& gt, int radius);

SegMetrics seg_metrics(const DenseLabel& pred, const DenseLabel& gt, int ciou_radius = kDefaultCiouRadius);

/// (iou + pa + dice) / 3
double s_score(const SegMetrics& m);

struct MetricReport {
  std::string task_id;
  LabelKind kind = LabelKind::binary_mask;
  std::size_t sample_count = 0;
  std::variant<DepthMetrics, SegMetrics> values;
  double score = 0.0;
};

struct EvaluateOptions {
  int ciou_radius = kDefaultCiouRadius;
};

/// Scores matched prediction / ground-truth pairs. Predictions are resized to
/// the ground-truth resolution (nearest for masks, bilinear for regression).
/// Per-sample metrics are averaged, then the unified score is taken from the
/// averaged metrics.
MetricReport evaluate_task(const std::string& task_id, LabelKind kind, const std::vector<DenseLabel>& predictions,
                           const std::vector<DenseLabel>& ground_truth, const std::optional<LabelRange>& range,
                           const EvaluateOptions& options = {});

struct PopulationSummary {
  double mean = 0.0;
  std::size_t tasks = 0;
};

struct AggregateSummary {
  /// Keyed by category, then by population ("D" or "S").
  std::map<std::string, std::map<std::string, PopulationSummary>> categories;
  std::optional<PopulationSummary> overall_d;
  std::optional<PopulationSummary> overall_s;
};

/// Unweighted per-task means within each category and overall; D-Score and
/// S-Score tasks are averaged separately. Tasks missing from `category_of`
/// are grouped under "uncategorized".
AggregateSummary aggregate(const std::vector<MetricReport>& reports,
                           const std::map<std::string, std::string>& category_of);

nlohmann::json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AggregateSummary& s);
/// One row per task; metric columns are the union of depth and seg metrics.
std::string reports_to_csv(const std::vector<MetricReport>& reports);

}  // namespace densedit::metrics
