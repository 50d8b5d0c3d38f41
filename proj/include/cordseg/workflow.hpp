#pragma once

// Dataset-level plumbing shared by the command-line tool and the acceptance
// suite: splits, per-stage training, evaluation and the cascade benchmark.

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cordseg/cascade.hpp"
#include "cordseg/config.hpp"
#include "cordseg/metrics.hpp"

namespace cordseg {

struct Dataset {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> ids() const;
  std::size_t index_of(const std::string &subject_id) const; // throws InvalidConfig
};

/// Reads `<dir>/manifest.json`.
Dataset open_dataset(const std::filesystem::path &dir);

void write_split(const Split &split, const Dataset &data, const std::filesystem::path &path);
Split read_split(const std::filesystem::path &path, const Dataset &data);

std::vector<WorkingSubject> prepare_subjects(const Dataset &data, const std::vector<std::size_t> &indices,
                                             const PreprocessConfig &cfg);

enum class Stage { Localizer, Segmenter };
std::string to_string(Stage s);
Stage stage_from_string(const std::string &s); // throws InvalidConfig

struct StageRun {
  TrainResult result;
  std::filesystem::path checkpoint, history_csv;
  double seconds = 0.0;
};

/// Trains one stage on the split's train/val subjects and writes
/// `<stage>.ckpt` and `<stage>_history.csv` into `out_dir`.
StageRun train_stage(Stage stage, const PipelineConfig &cfg, const Dataset &data, const Split &split,
                     const std::filesystem::path &out_dir, const TrainOptions &opts = {});

struct SubjectEvaluation {
  SubjectMetrics metrics;
  std::optional<double> cord_dice;        // cascade only, when a cord mask exists
  std::array<bool, kNumClasses> present{}; // ground truth non-empty
  std::array<bool, kNumClasses> inside{};  // fully inside the crop box
  bool used_fallback = false;
  std::vector<std::pair<std::string, double>> timings;
};

struct EvaluationSummary {
  std::vector<SubjectEvaluation> subjects;
  std::optional<double> mean_cord_dice;
  std::array<std::optional<double>, kNumClasses> mean_dice; // over subjects with the class in GT
  std::size_t structures = 0, structures_inside = 0;        // tumor, cavity and edema present in GT
  double inclusion_rate() const { return structures ? double(structures_inside) / double(structures) : 1.0; }
};

/// Metrics at working resolution unless `native_metrics`.
SubjectEvaluation evaluate_pipeline(const UNet3D *loc, const UNet3D &seg, const SubjectRecord &subject,
                                    const CascadeOptions &opt, bool native_metrics = false);
EvaluationSummary summarize(std::vector<SubjectEvaluation> subjects);
void to_json(nlohmann::json &j, const EvaluationSummary &s);

struct BenchmarkRow {
  std::string subject_id;
  double cascaded_seconds = 0.0, single_seconds = 0.0;
  double cascaded_whole_dice = 0.0, single_whole_dice = 0.0;
  bool used_fallback = false;
};

struct BenchmarkReport {
  std::vector<BenchmarkRow> rows;
  double mean_cascaded_seconds = 0.0, mean_single_seconds = 0.0;
  double mean_cascaded_whole_dice = 0.0, mean_single_whole_dice = 0.0;
};

/// Cascaded and single-step inference on the same working-lattice subjects.
/// Per-image time covers everything after preprocessing.
BenchmarkReport benchmark(const UNet3D &loc, const UNet3D &seg, const std::vector<WorkingSubject> &subjects,
                          const CascadeOptions &opt);
void to_json(nlohmann::json &j, const BenchmarkReport &r);

/// One NIfTI per class (`<id>_<class>.nii.gz`) plus `<id>_pred.json`.
void write_prediction(const CascadeResult &r, const std::string &subject_id, const std::filesystem::path &out_dir);
/// Reads predictions written by `write_prediction`; throws FileNotFound.
LabelSet read_prediction(const std::filesystem::path &dir, const std::string &subject_id);

} // namespace cordseg
