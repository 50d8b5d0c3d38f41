#include "cordseg/config.hpp"

#include <algorithm>
#include <fstream>

namespace cordseg {

namespace {

void reject_unknown(const nlohmann::json &j, std::initializer_list<const char *> known, const std::string &what) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, what + " must be an object");
  for (const auto &[key, _] : j.items())
    if (std::find_if(known.begin(), known.end(), [&](const char *k) { return key == k; }) == known.end())
      throw Error(ErrorKind::InvalidConfig, "unknown " + what + " key '" + key + "'");
}

template <typename A> nlohmann::json arr3(const A &a) { return nlohmann::json::array({a[0], a[1], a[2]}); }

template <typename A> void read3(const nlohmann::json &j, const char *key, A &out) {
  if (!j.contains(key)) return;
  const auto &v = j.at(key);
  if (!v.is_array() || v.size() != 3) throw Error(ErrorKind::InvalidConfig, std::string(key) + " needs 3 values");
  for (int i = 0; i < 3; ++i) out[i] = v[i].get<typename A::Scalar>();
}

template <typename T> void read(const nlohmann::json &j, const char *key, T &out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace

void to_json(nlohmann::json &j, const PostprocessRules &r) {
  j = nlohmann::json{{"threshold", r.threshold},
                     {"min_volume_mm3",
                      {{"tumor", r.min_volume_mm3[0]},
                       {"cavity", r.min_volume_mm3[1]},
                       {"edema", r.min_volume_mm3[2]},
                       {"whole", r.min_volume_mm3[3]}}},
                     {"fill_holes", r.fill_holes}};
}

void from_json(const nlohmann::json &j, PostprocessRules &r) {
  reject_unknown(j, {"threshold", "min_volume_mm3", "fill_holes"}, "postprocess");
  PostprocessRules d = r;
  read(j, "threshold", d.threshold);
  read(j, "fill_holes", d.fill_holes);
  if (j.contains("min_volume_mm3")) {
    const auto &m = j.at("min_volume_mm3");
    reject_unknown(m, {"tumor", "cavity", "edema", "whole"}, "min_volume_mm3");
    read(m, "tumor", d.min_volume_mm3[0]);
    read(m, "cavity", d.min_volume_mm3[1]);
    read(m, "edema", d.min_volume_mm3[2]);
    read(m, "whole", d.min_volume_mm3[3]);
  }
  d.validate();
  r = d;
}

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.localizer_train.max_epochs = 50;
  c.segmenter_train.max_epochs = 50;
  return c;
}

void PipelineConfig::validate() const {
  preprocess.validate();
  localizer_model.validate();
  segmenter_model.validate();
  localizer_train.validate();
  segmenter_train.validate();
  postprocess.validate();
  split.validate();
  if (localizer_model.in_channels != 1) throw Error(ErrorKind::InvalidConfig, "localizer takes T2w only");
  if (segmenter_model.in_channels != 2) throw Error(ErrorKind::InvalidConfig, "segmenter takes two contrasts");
  if (segmenter_model.out_channels != kNumClasses)
    throw Error(ErrorKind::InvalidConfig, "segmenter emits one channel per class");
  if ((patches.patch_size < 1).any() || (patches.stride < 1).any() || (patches.stride > patches.patch_size).any())
    throw Error(ErrorKind::InvalidConfig, "patch stride must be in [1, patch size]");
  if (!(localize.threshold > 0 && localize.threshold < 1))
    throw Error(ErrorKind::InvalidConfig, "localization threshold must be in (0,1)");
  if ((localize.margin_mm < 0).any() || (train_crop_margin_mm < 0).any())
    throw Error(ErrorKind::InvalidConfig, "margins must be >= 0");
  if (loss.smooth < 0) throw Error(ErrorKind::InvalidConfig, "loss smoothing must be >= 0");
}

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  split.seed = mix_seed(s, 1);
  localizer_model.seed = mix_seed(s, 2);
  segmenter_model.seed = mix_seed(s, 3);
  localizer_train.seed = mix_seed(s, 4);
  segmenter_train.seed = mix_seed(s, 5);
  augment.rng_seed = mix_seed(s, 6);
}

CascadeOptions PipelineConfig::cascade_options() const {
  CascadeOptions o;
  o.preprocess = preprocess;
  o.patches = patches;
  o.localize = localize;
  o.rules = postprocess;
  o.fallback_full_fov = fallback_full_fov;
  return o;
}

bool PipelineConfig::operator==(const PipelineConfig &o) const {
  return preprocess == o.preprocess && patches == o.patches && localize.threshold == o.localize.threshold &&
         (localize.margin_mm == o.localize.margin_mm).all() && localizer_model == o.localizer_model &&
         segmenter_model == o.segmenter_model && localizer_train == o.localizer_train &&
         segmenter_train == o.segmenter_train && loss.smooth == o.loss.smooth &&
         loss.denominator == o.loss.denominator && augment.rotation_deg == o.augment.rotation_deg &&
         augment.scale_frac == o.augment.scale_frac && augment.translate_frac == o.augment.translate_frac &&
         augment.rng_seed == o.augment.rng_seed && augment_enabled == o.augment_enabled &&
         (train_crop_margin_mm == o.train_crop_margin_mm).all() && postprocess == o.postprocess &&
         split == o.split && fallback_full_fov == o.fallback_full_fov && metrics_at_native == o.metrics_at_native &&
         paths == o.paths && seed == o.seed;
}

void to_json(nlohmann::json &j, const PipelineConfig &c) {
  j = nlohmann::json::object();
  j["schema"] = kConfigSchema;
  j["preprocess"] = {{"target_spacing_mm", arr3(c.preprocess.target_spacing)},
                     {"crop_shape", arr3(c.preprocess.crop_shape)}};
  j["patches"] = {{"patch_size", arr3(c.patches.patch_size)}, {"stride", arr3(c.patches.stride)}};
  j["localize"] = {{"threshold", c.localize.threshold}, {"margin_mm", arr3(c.localize.margin_mm)}};
  j["localizer_model"] = c.localizer_model;
  j["segmenter_model"] = c.segmenter_model;
  j["localizer_train"] = c.localizer_train;
  j["segmenter_train"] = c.segmenter_train;
  j["loss"] = {{"smooth", c.loss.smooth},
               {"denominator", c.loss.denominator == DiceDenominator::Squared ? "squared" : "linear"}};
  j["augment"] = {{"enabled", c.augment_enabled},
                  {"rotation_deg", c.augment.rotation_deg},
                  {"scale_frac", c.augment.scale_frac},
                  {"translate_frac", c.augment.translate_frac},
                  {"rng_seed", c.augment.rng_seed}};
  j["train_crop_margin_mm"] = arr3(c.train_crop_margin_mm);
  j["postprocess"] = c.postprocess;
  j["split"] = c.split;
  j["fallback_full_fov"] = c.fallback_full_fov;
  j["metrics_at_native"] = c.metrics_at_native;
  j["paths"] = {{"data_dir", c.paths.data_dir}, {"work_dir", c.paths.work_dir}};
  j["seed"] = c.seed;
}

void from_json(const nlohmann::json &j, PipelineConfig &c) {
  reject_unknown(j,
                 {"schema", "preprocess", "patches", "localize", "localizer_model", "segmenter_model",
                  "localizer_train", "segmenter_train", "loss", "augment", "train_crop_margin_mm", "postprocess",
                  "split", "fallback_full_fov", "metrics_at_native", "paths", "seed"},
                 "config");
  if (j.value("schema", std::string(kConfigSchema)) != kConfigSchema)
    throw Error(ErrorKind::InvalidConfig, "unsupported config schema '" + j.at("schema").get<std::string>() + "'");
  PipelineConfig d = c;
  try {
    if (j.contains("preprocess")) {
      const auto &p = j.at("preprocess");
      reject_unknown(p, {"target_spacing_mm", "crop_shape"}, "preprocess");
      read3(p, "target_spacing_mm", d.preprocess.target_spacing);
      read3(p, "crop_shape", d.preprocess.crop_shape);
    }
    if (j.contains("patches")) {
      const auto &p = j.at("patches");
      reject_unknown(p, {"patch_size", "stride"}, "patches");
      read3(p, "patch_size", d.patches.patch_size);
      read3(p, "stride", d.patches.stride);
    }
    if (j.contains("localize")) {
      const auto &p = j.at("localize");
      reject_unknown(p, {"threshold", "margin_mm"}, "localize");
      read(p, "threshold", d.localize.threshold);
      read3(p, "margin_mm", d.localize.margin_mm);
    }
    read(j, "localizer_model", d.localizer_model);
    read(j, "segmenter_model", d.segmenter_model);
    if (j.contains("localizer_train")) from_json(j.at("localizer_train"), d.localizer_train);
    if (j.contains("segmenter_train")) from_json(j.at("segmenter_train"), d.segmenter_train);
    if (j.contains("loss")) {
      const auto &p = j.at("loss");
      reject_unknown(p, {"smooth", "denominator"}, "loss");
      read(p, "smooth", d.loss.smooth);
      if (p.contains("denominator")) {
        const std::string s = p.at("denominator").get<std::string>();
        if (s == "squared") d.loss.denominator = DiceDenominator::Squared;
        else if (s == "linear") d.loss.denominator = DiceDenominator::Linear;
        else throw Error(ErrorKind::InvalidConfig, "loss denominator must be 'squared' or 'linear'");
      }
    }
    if (j.contains("augment")) {
      const auto &p = j.at("augment");
      reject_unknown(p, {"enabled", "rotation_deg", "scale_frac", "translate_frac", "rng_seed"}, "augment");
      read(p, "enabled", d.augment_enabled);
      read(p, "rotation_deg", d.augment.rotation_deg);
      read(p, "scale_frac", d.augment.scale_frac);
      read(p, "translate_frac", d.augment.translate_frac);
      read(p, "rng_seed", d.augment.rng_seed);
    }
    read3(j, "train_crop_margin_mm", d.train_crop_margin_mm);
    if (j.contains("postprocess")) from_json(j.at("postprocess"), d.postprocess);
    if (j.contains("split")) from_json(j.at("split"), d.split);
    read(j, "fallback_full_fov", d.fallback_full_fov);
    read(j, "metrics_at_native", d.metrics_at_native);
    if (j.contains("paths")) {
      const auto &p = j.at("paths");
      reject_unknown(p, {"data_dir", "work_dir"}, "paths");
      read(p, "data_dir", d.paths.data_dir);
      read(p, "work_dir", d.paths.work_dir);
    }
    read(j, "seed", d.seed);
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::InvalidConfig, std::string("config value has the wrong type: ") + e.what());
  }
  d.validate();
  c = d;
}

PipelineConfig load_config(const std::filesystem::path &path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::FileNotFound, path.string());
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
  PipelineConfig c;
  from_json(j, c);
  return c;
}

void save_config(const PipelineConfig &c, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << nlohmann::json(c).dump(2) << "\n";
  if (!out) throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

} // namespace cordseg
