#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cordseg/losses.hpp"
#include "cordseg/nifti.hpp"
#include "cordseg/unet3d.hpp"

namespace cordseg {

struct TrainConfig {
  double lr0 = 1e-3;
  int max_epochs = 200;
  int patience = 50;
  double min_delta = 1e-3;
  int batch_size = 1;
  std::uint64_t seed = 0;
  // Adam moments
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  static TrainConfig localizer();
  static TrainConfig segmenter();
  void validate() const; // throws InvalidConfig
  bool operator==(const TrainConfig &) const = default;
};

void to_json(nlohmann::json &j, const TrainConfig &c);
void from_json(const nlohmann::json &j, TrainConfig &c);

/// lr0/2 (1 + cos(pi epoch / max_epochs)), annealed to 0.
double cosine_lr(int epoch, const TrainConfig &cfg);

struct SplitSpec {
  double train_frac = 0.6;
  double val_frac = 0.2;
  double test_frac = 0.2;
  std::set<RegionTag> force_train{RegionTag::Lumbar};
  std::uint64_t seed = 0;

  void validate() const; // throws InvalidConfig
  bool operator==(const SplitSpec &) const = default;
};

void to_json(nlohmann::json &j, const SplitSpec &s);
void from_json(const nlohmann::json &j, SplitSpec &s);

/// Subject indices per partition, each sorted ascending.
struct Split {
  std::vector<std::size_t> train, val, test;
  bool operator==(const Split &) const = default;
};

/// val and test get floor(frac * n) subjects drawn from the shuffled
/// non-forced subjects; train gets everything else. Throws
/// InsufficientSubjects.
Split split_dataset(const std::vector<RegionTag> &tags, const SplitSpec &spec);
Split split_dataset(const std::vector<ManifestEntry> &subjects, const SplitSpec &spec);
Split split_dataset(const std::vector<SubjectRecord> &subjects, const SplitSpec &spec);

/// Split manifest: subject ids per partition.
nlohmann::json split_manifest(const Split &split, const std::vector<std::string> &ids);

struct Sample {
  FeatureMap input;
  FeatureMap target;
};

/// Indexed samples; `get` receives a per-draw augmentation seed (0 for
/// validation, which must not augment).
struct SampleSource {
  std::size_t size = 0;
  std::function<Sample(std::size_t index, std::uint64_t aug_seed)> get;
};

using LossFn = std::function<LossValue(const FeatureMap &pred, const FeatureMap &target, FeatureMap *grad)>;

/// Mean Dice loss over output channels.
LossFn dice_loss_fn(const DiceOptions &opt = {});

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool improved = false;
  double seconds = 0.0;
};

struct History {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  bool stopped_early = false;

  /// epoch,train_loss,val_loss,lr
  std::string csv() const;
  void write_csv(const std::filesystem::path &path) const;
};

struct StepInfo {
  int epoch = 0;
  std::size_t step = 0;       // within the epoch
  std::size_t steps_per_epoch = 0;
  double loss = 0.0;
  double seconds = 0.0;       // wall time of this step
};

struct TrainOptions {
  std::function<void(const EpochRecord &)> on_epoch;
  /// Return false to abort training (the current best model is returned).
  std::function<bool(const StepInfo &)> on_step;
  /// Where to write a checkpoint of the offending state on divergence.
  std::filesystem::path dump_dir;
};

class Adam {
public:
  Adam(const std::vector<Parameter> &params, double beta1, double beta2, double eps);
  void step(std::vector<Parameter> &params, double lr);
  std::int64_t steps() const { return t_; }

private:
  double beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<kernels::Matrix> m_, v_;
};

struct TrainResult {
  UNet3D model;
  History history;
  bool aborted = false;
};

/// Per-sample gradients are averaged over each batch (incomplete last batch
/// dropped); validation loss is the mean over the validation samples in
/// evaluation mode. Returns the parameters with the best validation loss.
/// Throws DivergedLoss on a non-finite loss.
TrainResult train(UNet3D model, const SampleSource &train_set, const SampleSource &val_set,
                  const TrainConfig &cfg, const LossFn &loss, const TrainOptions &opts = {});

/// Mean loss over a source in evaluation mode.
double evaluate_loss(const UNet3D &model, const SampleSource &source, const LossFn &loss);

/// splitmix64 of the combined words; used for per-draw seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c = 0);

} // namespace cordseg
