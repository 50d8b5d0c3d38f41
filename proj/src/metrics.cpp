#include "cordseg/metrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cordseg {

namespace {

template <typename Scalar> void require_same_shape(const Grid<Scalar> &a, const Grid<Scalar> &b) {
  if (a.dimensions() != b.dimensions())
    throw Error(ErrorKind::ShapeMismatch, "prediction and ground truth shapes differ");
}

nlohmann::json opt_json(const std::optional<double> &v) { return v ? nlohmann::json(*v) : nlohmann::json(); }
nlohmann::json opt_json(const std::optional<bool> &v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::string opt_csv(const std::optional<double> &v) {
  if (!v) return "";
  std::ostringstream s;
  s << std::setprecision(17) << *v;
  return s.str();
}
std::string opt_csv(const std::optional<bool> &v) { return v ? (*v ? "1" : "0") : ""; }

void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

} // namespace

template <typename Scalar> OverlapCounts overlap_counts(const Grid<Scalar> &pred, const Grid<Scalar> &gt) {
  require_same_shape(pred, gt);
  OverlapCounts c;
  const Scalar *p = pred.data(), *g = gt.data();
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    const bool a = p[i] != Scalar(0), b = g[i] != Scalar(0);
    c.pred += a;
    c.gt += b;
    c.both += a && b;
  }
  return c;
}

template <typename Scalar> double dice_score(const Grid<Scalar> &pred, const Grid<Scalar> &gt) {
  const OverlapCounts c = overlap_counts(pred, gt);
  if (c.pred + c.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.gt);
}

template <typename Scalar>
Detection detection(const Grid<Scalar> &pred, const Grid<Scalar> &gt, const Spacing3 &spacing, double min_mm3) {
  const OverlapCounts c = overlap_counts(pred, gt);
  const double vox = voxel_volume_mm3(spacing);
  Detection d;
  if (c.gt > 0)
    d.tp = static_cast<double>(c.both) * vox >= min_mm3;
  else
    d.fp = static_cast<double>(c.pred) * vox >= min_mm3;
  return d;
}

template <typename Scalar>
std::pair<std::optional<double>, std::optional<double>> precision_recall(const Grid<Scalar> &pred,
                                                                          const Grid<Scalar> &gt) {
  const OverlapCounts c = overlap_counts(pred, gt);
  std::pair<std::optional<double>, std::optional<double>> out;
  if (c.pred > 0) out.first = static_cast<double>(c.both) / static_cast<double>(c.pred);
  if (c.gt > 0) out.second = static_cast<double>(c.both) / static_cast<double>(c.gt);
  return out;
}

template <typename Scalar>
VolumeDifference volume_differences(const Grid<Scalar> &pred, const Grid<Scalar> &gt, const Spacing3 &spacing) {
  const OverlapCounts c = overlap_counts(pred, gt);
  if (c.gt == 0) throw Error(ErrorKind::UndefinedForEmptyGT, "volume difference needs a nonempty ground truth");
  const double vox = voxel_volume_mm3(spacing);
  const double vg = static_cast<double>(c.gt) * vox, vp = static_cast<double>(c.pred) * vox;
  VolumeDifference v;
  v.rel = 100.0 * (vg - vp) / vg;
  v.abs = std::abs(v.rel);
  return v;
}

ClassMetrics evaluate_class(const SoftMask &pred, const SoftMask &gt, const Spacing3 &spacing) {
  const OverlapCounts c = overlap_counts(pred, gt);
  const double vox = voxel_volume_mm3(spacing);
  ClassMetrics m;
  m.gt_present = c.gt > 0;
  m.pred_mm3 = static_cast<double>(c.pred) * vox;
  m.gt_mm3 = static_cast<double>(c.gt) * vox;
  m.dice = dice_score(pred, gt);
  const Detection d = detection(pred, gt, spacing);
  m.detected_tp = d.tp;
  m.detected_fp = d.fp;
  std::tie(m.precision, m.recall) = precision_recall(pred, gt);
  if (m.gt_present) {
    const VolumeDifference v = volume_differences(pred, gt, spacing);
    m.rel_vol_diff = v.rel;
    m.abs_vol_diff = v.abs;
  }
  return m;
}

SubjectMetrics evaluate_subject(const LabelSet &pred, const LabelSet &gt, std::string subject_id) {
  if (!pred.geometry.same_lattice(gt.geometry))
    throw Error(ErrorKind::GeometryMismatch, "prediction and ground truth lattices differ");
  for (int c = 0; c < kNumClasses; ++c)
    if (pred.masks[c].dimensions() != gt.masks[c].dimensions())
      throw Error(ErrorKind::GeometryMismatch, "class grid shapes differ");
  SubjectMetrics out;
  out.subject_id = std::move(subject_id);
  for (int c = 0; c < kNumClasses; ++c)
    out.classes[c] = evaluate_class(pred.masks[c], gt.masks[c], gt.geometry.spacing);
  return out;
}

std::optional<double> run_value(const std::vector<SubjectMetrics> &run, LabelClass cls, Metric metric) {
  double sum = 0.0;
  int n = 0;
  for (const SubjectMetrics &s : run) {
    const ClassMetrics &m = s.classes[static_cast<int>(cls)];
    std::optional<double> v;
    switch (metric) {
    case Metric::Dice: v = m.dice; break;
    case Metric::TpRate:
      if (m.detected_tp) v = *m.detected_tp ? 1.0 : 0.0;
      break;
    case Metric::FpRate:
      if (m.detected_fp) v = *m.detected_fp ? 1.0 : 0.0;
      break;
    case Metric::Precision: v = m.precision; break;
    case Metric::Recall: v = m.recall; break;
    case Metric::RelVolDiff: v = m.rel_vol_diff; break;
    case Metric::AbsVolDiff: v = m.abs_vol_diff; break;
    }
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

AggregateReport aggregate(const std::vector<std::vector<SubjectMetrics>> &runs) {
  if (runs.empty()) throw Error(ErrorKind::EmptyRuns, "no cross-validation runs");
  AggregateReport r;
  r.runs = static_cast<int>(runs.size());
  for (int c = 0; c < kNumClasses; ++c)
    for (int m = 0; m < kNumMetrics; ++m) {
      std::vector<double> vals;
      for (const auto &run : runs)
        if (auto v = run_value(run, static_cast<LabelClass>(c), static_cast<Metric>(m))) vals.push_back(*v);
      MeanStd &ms = r.values[c][m];
      ms.runs = static_cast<int>(vals.size());
      if (vals.empty()) continue;
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= static_cast<double>(vals.size());
      double var = 0.0;
      for (double v : vals) var += (v - mean) * (v - mean);
      ms.mean = mean;
      ms.std = std::sqrt(var / static_cast<double>(vals.size()));
    }
  return r;
}

void to_json(nlohmann::json &j, const SubjectMetrics &m) {
  j = nlohmann::json::object();
  j["subject_id"] = m.subject_id;
  for (int c = 0; c < kNumClasses; ++c) {
    const ClassMetrics &k = m.classes[c];
    j[std::string(kClassNames[c])] = {
        {"gt_present", k.gt_present},   {"dice", opt_json(k.dice)},
        {"detected_tp", opt_json(k.detected_tp)}, {"detected_fp", opt_json(k.detected_fp)},
        {"precision", opt_json(k.precision)},     {"recall", opt_json(k.recall)},
        {"rel_vol_diff", opt_json(k.rel_vol_diff)}, {"abs_vol_diff", opt_json(k.abs_vol_diff)},
        {"pred_mm3", k.pred_mm3},                 {"gt_mm3", k.gt_mm3}};
  }
}

void to_json(nlohmann::json &j, const AggregateReport &r) {
  j = nlohmann::json::object();
  j["runs"] = r.runs;
  for (int c = 0; c < kNumClasses; ++c)
    for (int m = 0; m < kNumMetrics; ++m) {
      const MeanStd &v = r.values[c][m];
      j[std::string(kClassNames[c])][std::string(kMetricNames[m])] = {
          {"mean", opt_json(v.mean)}, {"std", opt_json(v.std)}, {"runs", v.runs}};
    }
}

void write_metrics_csv(const std::vector<SubjectMetrics> &rows, const std::filesystem::path &path) {
  std::ostringstream s;
  s << "subject_id,class,gt_present,dice,detected_tp,detected_fp,precision,recall,rel_vol_diff,abs_vol_diff,"
       "pred_mm3,gt_mm3\n";
  for (const SubjectMetrics &r : rows)
    for (int c = 0; c < kNumClasses; ++c) {
      const ClassMetrics &k = r.classes[c];
      s << r.subject_id << ',' << kClassNames[c] << ',' << (k.gt_present ? 1 : 0) << ',' << opt_csv(k.dice) << ','
        << opt_csv(k.detected_tp) << ',' << opt_csv(k.detected_fp) << ',' << opt_csv(k.precision) << ','
        << opt_csv(k.recall) << ',' << opt_csv(k.rel_vol_diff) << ',' << opt_csv(k.abs_vol_diff) << ','
        << opt_csv(std::optional<double>(k.pred_mm3)) << ',' << opt_csv(std::optional<double>(k.gt_mm3)) << '\n';
    }
  write_text(path, s.str());
}

void write_metrics_json(const std::vector<SubjectMetrics> &rows, const std::filesystem::path &path) {
  nlohmann::json j = rows;
  write_text(path, j.dump(2) + "\n");
}

void write_report_json(const AggregateReport &report, const std::filesystem::path &path) {
  nlohmann::json j = report;
  write_text(path, j.dump(2) + "\n");
}

std::string format_report(const AggregateReport &report) {
  std::ostringstream s;
  s << std::left << std::setw(14) << "metric";
  for (auto name : kClassNames) s << std::setw(20) << name;
  s << '\n';
  for (int m = 0; m < kNumMetrics; ++m) {
    s << std::setw(14) << kMetricNames[m];
    // rates and dice are fractions; show them as percentages like volume differences
    const double scale = (m == static_cast<int>(Metric::RelVolDiff) || m == static_cast<int>(Metric::AbsVolDiff)) ? 1.0 : 100.0;
    for (int c = 0; c < kNumClasses; ++c) {
      const MeanStd &v = report.values[c][m];
      std::ostringstream cell;
      if (v.mean)
        cell << std::fixed << std::setprecision(1) << *v.mean * scale << " ± " << *v.std * scale;
      else
        cell << "n/a";
      s << std::setw(20) << cell.str();
    }
    s << '\n';
  }
  s << "(" << report.runs << " runs, MEAN ± STD, %)\n";
  return s.str();
}

#define CORDSEG_INSTANTIATE(T)                                                                             \
  template OverlapCounts overlap_counts(const Grid<T> &, const Grid<T> &);                                 \
  template double dice_score(const Grid<T> &, const Grid<T> &);                                            \
  template Detection detection(const Grid<T> &, const Grid<T> &, const Spacing3 &, double);                \
  template std::pair<std::optional<double>, std::optional<double>> precision_recall(const Grid<T> &,       \
                                                                                    const Grid<T> &);      \
  template VolumeDifference volume_differences(const Grid<T> &, const Grid<T> &, const Spacing3 &);

CORDSEG_INSTANTIATE(float)
CORDSEG_INSTANTIATE(std::uint8_t)
#undef CORDSEG_INSTANTIATE

} // namespace cordseg
