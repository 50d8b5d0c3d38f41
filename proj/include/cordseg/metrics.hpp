#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cordseg/volume.hpp"

namespace cordseg {

/// Voxel counts of a binary pair; nonzero means foreground.
struct OverlapCounts {
  Eigen::Index pred = 0, gt = 0, both = 0;
};

template <typename Scalar> OverlapCounts overlap_counts(const Grid<Scalar> &pred, const Grid<Scalar> &gt);

/// 2|P&G| / (|P| + |G|); 1 when both are empty. Throws ShapeMismatch.
template <typename Scalar> double dice_score(const Grid<Scalar> &pred, const Grid<Scalar> &gt);

struct Detection {
  std::optional<bool> tp; // defined when the ground truth is nonempty
  std::optional<bool> fp; // defined when the ground truth is empty
};

inline constexpr double kDetectionMm3 = 6.0;

/// Subject-level detection with an overlap (or prediction) volume of at
/// least `min_mm3`. Throws ShapeMismatch.
template <typename Scalar>
Detection detection(const Grid<Scalar> &pred, const Grid<Scalar> &gt, const Spacing3 &spacing,
                    double min_mm3 = kDetectionMm3);

/// (precision, recall); each undefined when its denominator is zero.
template <typename Scalar>
std::pair<std::optional<double>, std::optional<double>> precision_recall(const Grid<Scalar> &pred,
                                                                          const Grid<Scalar> &gt);

struct VolumeDifference {
  double rel = 0.0; // 100 (V_gt - V_pred) / V_gt; negative = over-segmentation
  double abs = 0.0;
};

/// Throws UndefinedForEmptyGT.
template <typename Scalar>
VolumeDifference volume_differences(const Grid<Scalar> &pred, const Grid<Scalar> &gt, const Spacing3 &spacing);

struct ClassMetrics {
  bool gt_present = false;
  std::optional<double> dice;
  std::optional<bool> detected_tp, detected_fp;
  std::optional<double> precision, recall;
  std::optional<double> rel_vol_diff, abs_vol_diff;
  double pred_mm3 = 0.0, gt_mm3 = 0.0;
};

struct SubjectMetrics {
  std::string subject_id;
  std::array<ClassMetrics, kNumClasses> classes;
};

ClassMetrics evaluate_class(const SoftMask &pred, const SoftMask &gt, const Spacing3 &spacing);

/// All classes, including the combined `whole` channel. Throws GeometryMismatch.
SubjectMetrics evaluate_subject(const LabelSet &pred, const LabelSet &gt, std::string subject_id = {});

enum class Metric { Dice, TpRate, FpRate, Precision, Recall, RelVolDiff, AbsVolDiff };
inline constexpr int kNumMetrics = 7;
inline constexpr std::array<std::string_view, kNumMetrics> kMetricNames{
    "dice", "tp_rate", "fp_rate", "precision", "recall", "rel_vol_diff", "abs_vol_diff"};

struct MeanStd {
  std::optional<double> mean, std; // undefined when no run has a value
  int runs = 0;
};

struct AggregateReport {
  std::array<std::array<MeanStd, kNumMetrics>, kNumClasses> values;
  int runs = 0;
  const MeanStd &at(LabelClass c, Metric m) const {
    return values[static_cast<int>(c)][static_cast<int>(m)];
  }
};

/// Per-run value of one metric: mean over defined subject values, or the
/// detection rate (count true / count defined).
std::optional<double> run_value(const std::vector<SubjectMetrics> &run, LabelClass c, Metric m);

/// Mean +- population standard deviation across runs. Throws EmptyRuns.
AggregateReport aggregate(const std::vector<std::vector<SubjectMetrics>> &runs);

void to_json(nlohmann::json &j, const SubjectMetrics &m);
void to_json(nlohmann::json &j, const AggregateReport &r);

void write_metrics_csv(const std::vector<SubjectMetrics> &rows, const std::filesystem::path &path);
void write_metrics_json(const std::vector<SubjectMetrics> &rows, const std::filesystem::path &path);
void write_report_json(const AggregateReport &report, const std::filesystem::path &path);
/// Rows: metrics; columns: classes; cells "MEAN ± STD".
std::string format_report(const AggregateReport &report);

} // namespace cordseg
