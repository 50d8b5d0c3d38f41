#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cordseg/augment.hpp"
#include "cordseg/cascade.hpp"
#include "cordseg/losses.hpp"
#include "cordseg/training.hpp"
#include "cordseg/unet3d.hpp"

namespace cordseg {

inline constexpr const char *kConfigSchema = "cordseg-config/1";

struct PathsConfig {
  std::string data_dir = "data";
  std::string work_dir = "work";
  bool operator==(const PathsConfig &) const = default;
};

struct PipelineConfig {
  PreprocessConfig preprocess;
  PatchConfig patches;
  LocalizeOptions localize;
  ModelConfig localizer_model = ModelConfig::localizer();
  ModelConfig segmenter_model = ModelConfig::segmenter();
  TrainConfig localizer_train = TrainConfig::localizer();
  TrainConfig segmenter_train = TrainConfig::segmenter();
  DiceOptions loss;
  AffineParams augment;
  bool augment_enabled = true;
  /// Margin around the ground-truth cord mask for segmenter training crops.
  Eigen::Array3d train_crop_margin_mm{10.0, 10.0, 10.0};
  PostprocessRules postprocess;
  SplitSpec split;
  bool fallback_full_fov = false;
  bool metrics_at_native = false;
  PathsConfig paths;
  std::uint64_t seed = 0;

  /// Defaults with the epoch cap used for phantom-scale runs.
  static PipelineConfig desk();

  void validate() const; // throws InvalidConfig
  /// Sets `seed` and derives the split, initialization, training and
  /// augmentation seeds from it.
  void apply_seed(std::uint64_t s);
  CascadeOptions cascade_options() const;
  bool operator==(const PipelineConfig &o) const;
};

void to_json(nlohmann::json &j, const PipelineConfig &c);
/// Unknown keys and a foreign schema string throw InvalidConfig.
void from_json(const nlohmann::json &j, PipelineConfig &c);

PipelineConfig load_config(const std::filesystem::path &path); // FileNotFound, IoFailure, InvalidConfig
void save_config(const PipelineConfig &c, const std::filesystem::path &path);

void to_json(nlohmann::json &j, const PostprocessRules &r);
void from_json(const nlohmann::json &j, PostprocessRules &r);

} // namespace cordseg
