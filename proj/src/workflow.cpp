#include "cordseg/workflow.hpp"

#include <chrono>
#include <fstream>

#include "cordseg/nifti.hpp"

namespace cordseg {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::size_t> concat(const std::vector<std::size_t> &a, const std::vector<std::size_t> &b) {
  std::vector<std::size_t> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

} // namespace

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  for (const auto &e : entries) out.push_back(e.subject_id);
  return out;
}

std::size_t Dataset::index_of(const std::string &id) const {
  for (std::size_t i = 0; i < entries.size(); ++i)
    if (entries[i].subject_id == id) return i;
  throw Error(ErrorKind::InvalidConfig, "subject '" + id + "' is not in the manifest");
}

Dataset open_dataset(const fs::path &dir) {
  Dataset d;
  d.root = dir;
  d.entries = read_manifest(dir / "manifest.json");
  return d;
}

void write_split(const Split &split, const Dataset &data, const fs::path &path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + path.string());
  out << split_manifest(split, data.ids()).dump(2) << "\n";
}

Split read_split(const fs::path &path, const Dataset &data) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::FileNotFound, path.string());
  nlohmann::json j;
  try {
    in >> j;
    Split s;
    for (const auto &id : j.at("train")) s.train.push_back(data.index_of(id.get<std::string>()));
    for (const auto &id : j.at("val")) s.val.push_back(data.index_of(id.get<std::string>()));
    for (const auto &id : j.at("test")) s.test.push_back(data.index_of(id.get<std::string>()));
    return s;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
}

std::vector<WorkingSubject> prepare_subjects(const Dataset &data, const std::vector<std::size_t> &indices,
                                             const PreprocessConfig &cfg) {
  std::vector<WorkingSubject> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(preprocess_subject(load_subject(data.entries.at(i)), cfg));
  return out;
}

std::string to_string(Stage s) { return s == Stage::Localizer ? "localizer" : "segmenter"; }

Stage stage_from_string(const std::string &s) {
  if (s == "localizer") return Stage::Localizer;
  if (s == "segmenter") return Stage::Segmenter;
  throw Error(ErrorKind::InvalidConfig, "stage must be 'localizer' or 'segmenter', got '" + s + "'");
}

StageRun train_stage(Stage stage, const PipelineConfig &cfg, const Dataset &data, const Split &split,
                     const fs::path &out_dir, const TrainOptions &opts) {
  cfg.validate();
  fs::create_directories(out_dir);
  const auto t0 = Clock::now();
  SampleSource train_src, val_src;
  if (stage == Stage::Localizer) {
    auto tr = std::make_shared<std::vector<LocalizerItem>>();
    auto va = std::make_shared<std::vector<LocalizerItem>>();
    for (std::size_t i : concat(split.train, split.val)) {
      const WorkingSubject w = preprocess_subject(load_subject(data.entries.at(i)), cfg.preprocess);
      const bool is_train = std::find(split.train.begin(), split.train.end(), i) != split.train.end();
      (is_train ? tr : va)->push_back(make_localizer_item(w));
    }
    train_src = localizer_samples(tr, cfg.augment, cfg.augment_enabled);
    val_src = localizer_samples(va, cfg.augment, false);
  } else {
    auto tr = std::make_shared<std::vector<SegmenterItem>>();
    auto va = std::make_shared<std::vector<SegmenterItem>>();
    for (std::size_t i : concat(split.train, split.val)) {
      const WorkingSubject w = preprocess_subject(load_subject(data.entries.at(i)), cfg.preprocess);
      const bool is_train = std::find(split.train.begin(), split.train.end(), i) != split.train.end();
      (is_train ? tr : va)->push_back(make_segmenter_item(w, cfg.patches, cfg.train_crop_margin_mm));
    }
    train_src = segmenter_samples(tr, cfg.augment, cfg.augment_enabled);
    val_src = segmenter_samples(va, cfg.augment, false);
  }
  if (train_src.size == 0 || val_src.size == 0)
    throw Error(ErrorKind::InsufficientSubjects, "training and validation sets must not be empty");

  const ModelConfig &mc = stage == Stage::Localizer ? cfg.localizer_model : cfg.segmenter_model;
  const TrainConfig &tc = stage == Stage::Localizer ? cfg.localizer_train : cfg.segmenter_train;
  TrainOptions o = opts;
  if (o.dump_dir.empty()) o.dump_dir = out_dir;
  StageRun run{train(UNet3D(mc), train_src, val_src, tc, dice_loss_fn(cfg.loss), o), {}, {}, 0.0};
  run.checkpoint = out_dir / (to_string(stage) + ".ckpt");
  run.history_csv = out_dir / (to_string(stage) + "_history.csv");
  run.result.model.save(run.checkpoint);
  run.result.history.write_csv(run.history_csv);
  run.seconds = seconds_since(t0);
  return run;
}

SubjectEvaluation evaluate_pipeline(const UNet3D *loc, const UNet3D &seg, const SubjectRecord &subject,
                                    const CascadeOptions &opt, bool native_metrics) {
  if (!subject.gt) throw Error(ErrorKind::EmptyMask, subject.subject_id + ": no ground truth to evaluate");
  const auto t0 = Clock::now();
  const WorkingSubject w = preprocess_subject(subject, opt.preprocess);
  const double prep = seconds_since(t0);
  const CascadeResult r = run_pipeline(loc, seg, w, opt);

  SubjectEvaluation e;
  e.timings = r.timings;
  e.timings.insert(e.timings.begin(), {"preprocess", prep});
  e.used_fallback = r.used_fallback;
  e.metrics = native_metrics ? evaluate_subject(r.labels_native, *subject.gt, subject.subject_id)
                             : evaluate_subject(r.binary_working, *w.gt, subject.subject_id);
  if (!opt.single_step && w.cord_mask && r.sc_mask.size()) e.cord_dice = dice_score(r.sc_mask, w.cord_mask->data);
  e.inside = check_bbox_inclusion(r.bbox, *w.gt);
  for (int c = 0; c < kNumClasses; ++c) e.present[c] = e.metrics.classes[c].gt_present;
  return e;
}

EvaluationSummary summarize(std::vector<SubjectEvaluation> subjects) {
  EvaluationSummary s;
  s.subjects = std::move(subjects);
  double cord = 0;
  int n_cord = 0;
  std::array<double, kNumClasses> sum{};
  std::array<int, kNumClasses> n{};
  for (const auto &e : s.subjects) {
    if (e.cord_dice) {
      cord += *e.cord_dice;
      ++n_cord;
    }
    for (int c = 0; c < kNumClasses; ++c) {
      if (!e.present[c]) continue;
      sum[c] += e.metrics.classes[c].dice.value_or(0.0);
      ++n[c];
      if (c != static_cast<int>(LabelClass::Whole)) {
        ++s.structures;
        s.structures_inside += e.inside[c] ? 1 : 0;
      }
    }
  }
  if (n_cord) s.mean_cord_dice = cord / n_cord;
  for (int c = 0; c < kNumClasses; ++c)
    if (n[c]) s.mean_dice[c] = sum[c] / n[c];
  return s;
}

void to_json(nlohmann::json &j, const EvaluationSummary &s) {
  j = nlohmann::json::object();
  j["subjects"] = nlohmann::json::array();
  for (const auto &e : s.subjects) {
    nlohmann::json row = e.metrics;
    if (e.cord_dice) row["cord_dice"] = *e.cord_dice;
    nlohmann::json inc = nlohmann::json::object();
    for (int c = 0; c < kNumClasses; ++c)
      if (e.present[c]) inc[std::string(kClassNames[c])] = e.inside[c];
    row["inside_bbox"] = inc;
    row["used_fallback"] = e.used_fallback;
    j["subjects"].push_back(row);
  }
  j["mean_cord_dice"] = s.mean_cord_dice ? nlohmann::json(*s.mean_cord_dice) : nlohmann::json();
  for (int c = 0; c < kNumClasses; ++c)
    j["mean_dice"][std::string(kClassNames[c])] = s.mean_dice[c] ? nlohmann::json(*s.mean_dice[c]) : nlohmann::json();
  j["structures"] = s.structures;
  j["structures_inside_bbox"] = s.structures_inside;
  j["inclusion_rate"] = s.inclusion_rate();
}

BenchmarkReport benchmark(const UNet3D &loc, const UNet3D &seg, const std::vector<WorkingSubject> &subjects,
                          const CascadeOptions &opt) {
  BenchmarkReport rep;
  const int whole = static_cast<int>(LabelClass::Whole);
  for (const WorkingSubject &w : subjects) {
    if (!w.gt) throw Error(ErrorKind::EmptyMask, w.subject_id + ": no ground truth");
    BenchmarkRow row;
    row.subject_id = w.subject_id;
    CascadeOptions o = opt;
    o.single_step = false;
    auto t0 = Clock::now();
    const CascadeResult c = run_pipeline(&loc, seg, w, o);
    row.cascaded_seconds = seconds_since(t0);
    row.used_fallback = c.used_fallback;
    o.single_step = true;
    t0 = Clock::now();
    const CascadeResult s = run_pipeline(nullptr, seg, w, o);
    row.single_seconds = seconds_since(t0);
    row.cascaded_whole_dice = dice_score(c.binary_working.masks[whole], w.gt->masks[whole]);
    row.single_whole_dice = dice_score(s.binary_working.masks[whole], w.gt->masks[whole]);
    rep.rows.push_back(row);
  }
  const double n = std::max<std::size_t>(rep.rows.size(), 1);
  for (const auto &r : rep.rows) {
    rep.mean_cascaded_seconds += r.cascaded_seconds / n;
    rep.mean_single_seconds += r.single_seconds / n;
    rep.mean_cascaded_whole_dice += r.cascaded_whole_dice / n;
    rep.mean_single_whole_dice += r.single_whole_dice / n;
  }
  return rep;
}

void to_json(nlohmann::json &j, const BenchmarkReport &r) {
  j = nlohmann::json::object();
  j["rows"] = nlohmann::json::array();
  for (const auto &row : r.rows)
    j["rows"].push_back({{"subject_id", row.subject_id},
                         {"cascaded_seconds", row.cascaded_seconds},
                         {"single_step_seconds", row.single_seconds},
                         {"cascaded_whole_dice", row.cascaded_whole_dice},
                         {"single_step_whole_dice", row.single_whole_dice},
                         {"used_fallback", row.used_fallback}});
  j["mean_cascaded_seconds"] = r.mean_cascaded_seconds;
  j["mean_single_step_seconds"] = r.mean_single_seconds;
  j["mean_cascaded_whole_dice"] = r.mean_cascaded_whole_dice;
  j["mean_single_step_whole_dice"] = r.mean_single_whole_dice;
}

void write_prediction(const CascadeResult &r, const std::string &id, const fs::path &out_dir) {
  fs::create_directories(out_dir);
  for (int c = 0; c < kNumClasses; ++c) {
    const Mask m = r.labels_native.masks[c].cast<std::uint8_t>();
    write_mask(MaskVolume(m, r.labels_native.geometry), out_dir / (id + "_" + std::string(kClassNames[c]) + ".nii.gz"));
  }
  nlohmann::json side;
  side["subject_id"] = id;
  side["version"] = kPipelineVersion;
  side["bbox_working"] = {{"min", {r.bbox.min_idx[0], r.bbox.min_idx[1], r.bbox.min_idx[2]}},
                          {"max", {r.bbox.max_idx[0], r.bbox.max_idx[1], r.bbox.max_idx[2]}}};
  side["used_fallback"] = r.used_fallback;
  for (const auto &[stage, t] : r.timings) side["timings_s"][stage] = t;
  std::ofstream out(out_dir / (id + "_pred.json"));
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write sidecar in " + out_dir.string());
  out << side.dump(2) << "\n";
}

LabelSet read_prediction(const fs::path &dir, const std::string &id) {
  std::optional<LabelSet> out;
  for (int c = 0; c < kNumClasses; ++c) {
    const fs::path p = dir / (id + "_" + std::string(kClassNames[c]) + ".nii.gz");
    if (!fs::exists(p)) throw Error(ErrorKind::FileNotFound, p.string());
    const MaskVolume m = read_mask(p);
    if (!out) out.emplace(m.geometry());
    else if (!out->geometry.same_lattice(m.geometry()))
      throw Error(ErrorKind::GeometryMismatch, p.string() + ": lattice differs from the other classes");
    out->masks[c] = m.data.cast<float>();
  }
  return *out;
}

} // namespace cordseg
