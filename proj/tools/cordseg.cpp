// cordseg command-line tool.
//
// Exit codes: 0 ok, 1 usage, 2 I/O (missing/corrupt files), 3 validation,
// 4 diverged training, 5 empty localization, 6 export parity failure.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "cordseg/config.hpp"
#include "cordseg/nifti.hpp"
#include "cordseg/onnx.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/workflow.hpp"

using namespace cordseg;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kValidation = 3, kDiverged = 4, kLocalization = 5, kParity = 6 };

int exit_code(ErrorKind k) {
  switch (k) {
  case ErrorKind::FileNotFound:
  case ErrorKind::IoFailure:
  case ErrorKind::MalformedHeader:
  case ErrorKind::UnsupportedDatatype:
  case ErrorKind::UnknownOrientation:
  case ErrorKind::NonPositiveSpacing:
  case ErrorKind::CorruptCheckpoint: return kIo;
  case ErrorKind::DivergedLoss: return kDiverged;
  case ErrorKind::LocalizationEmpty: return kLocalization;
  case ErrorKind::ExportParityFailure: return kParity;
  default: return kValidation;
  }
}

struct Common {
  std::string config;
  std::string data_dir, work_dir;
  std::optional<std::uint64_t> seed;
};

PipelineConfig resolve(const Common &c) {
  PipelineConfig cfg = c.config.empty() ? PipelineConfig() : load_config(c.config);
  if (c.seed) cfg.apply_seed(*c.seed);
  if (!c.data_dir.empty()) cfg.paths.data_dir = c.data_dir;
  if (!c.work_dir.empty()) cfg.paths.work_dir = c.work_dir;
  return cfg;
}

void add_common(CLI::App *app, Common &c) {
  app->add_option("--config", c.config, "Pipeline config (JSON)")->envname("CORDSEG_CONFIG");
  app->add_option("--data", c.data_dir, "Dataset directory holding manifest.json")->envname("CORDSEG_DATA_DIR");
  app->add_option("--work", c.work_dir, "Working directory for splits and checkpoints")->envname("CORDSEG_WORK_DIR");
  app->add_option("--seed", c.seed, "Master seed")->envname("CORDSEG_SEED");
}

void print_timings(const std::string &id, const std::vector<std::pair<std::string, double>> &timings) {
  std::cout << id << ":";
  double total = 0;
  for (const auto &[stage, t] : timings) {
    std::cout << " " << stage << "=" << std::fixed << std::setprecision(2) << t << "s";
    total += t;
  }
  std::cout << " total=" << total << "s\n" << std::defaultfloat;
}

Split load_or_make_split(const PipelineConfig &cfg, const Dataset &data, const std::string &split_path) {
  const fs::path p = split_path.empty() ? fs::path(cfg.paths.work_dir) / "split.json" : fs::path(split_path);
  if (fs::exists(p)) return read_split(p, data);
  const Split s = split_dataset(data.entries, cfg.split);
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  write_split(s, data, p);
  std::cout << "wrote split " << p.string() << " (" << s.train.size() << "/" << s.val.size() << "/" << s.test.size()
            << ")\n";
  return s;
}

std::vector<std::size_t> selected(const Dataset &data, const std::string &split_path, const std::string &part) {
  if (split_path.empty()) {
    std::vector<std::size_t> all(data.entries.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return all;
  }
  const Split s = read_split(split_path, data);
  if (part == "train") return s.train;
  if (part == "val") return s.val;
  return s.test;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Cascaded spinal cord tumor segmentation"};
  app.require_subcommand(1);
  Common common;

  // config
  auto *c_cfg = app.add_subcommand("config", "Write a pipeline config with default values");
  std::string cfg_out;
  bool cfg_desk = false;
  c_cfg->add_option("--out", cfg_out, "Output JSON")->required();
  c_cfg->add_flag("--desk", cfg_desk, "Cap epochs at 50 for phantom-scale runs");
  add_common(c_cfg, common);

  // phantom
  auto *c_ph = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  int ph_n = PhantomSpec::kDeskSubjects;
  std::string ph_out, ph_spec;
  std::uint64_t ph_seed = 0;
  c_ph->add_option("--n", ph_n, "Number of subjects")->check(CLI::PositiveNumber);
  c_ph->add_option("--out", ph_out, "Output directory")->required();
  c_ph->add_option("--seed", ph_seed, "Dataset seed")->envname("CORDSEG_SEED");
  c_ph->add_option("--spec", ph_spec, "Phantom spec JSON (defaults to the desk profile)");

  // train
  auto *c_tr = app.add_subcommand("train", "Train one stage");
  std::string tr_stage, tr_split;
  c_tr->add_option("--stage", tr_stage, "localizer or segmenter")->required();
  c_tr->add_option("--split", tr_split, "Split manifest (default <work>/split.json, created if absent)");
  add_common(c_tr, common);

  // infer
  auto *c_inf = app.add_subcommand("infer", "Run the pipeline on one subject or a dataset");
  std::string inf_t2w, inf_t1w, inf_loc, inf_seg, inf_out, inf_id = "subject", inf_split, inf_part = "test";
  bool inf_fallback = false, inf_single = false;
  c_inf->add_option("--t2w", inf_t2w, "T2w NIfTI");
  c_inf->add_option("--t1w", inf_t1w, "Gd-enhanced T1w NIfTI");
  c_inf->add_option("--id", inf_id, "Subject id used in output names");
  c_inf->add_option("--split", inf_split, "With --data: split manifest selecting subjects");
  c_inf->add_option("--part", inf_part, "Split partition to run")->check(CLI::IsMember({"train", "val", "test"}));
  c_inf->add_option("--localizer", inf_loc, "Localizer checkpoint");
  c_inf->add_option("--segmenter", inf_seg, "Segmenter checkpoint")->required();
  c_inf->add_option("--out", inf_out, "Output directory")->required();
  c_inf->add_flag("--fallback-full-fov", inf_fallback, "Segment the full grid when localization is empty");
  c_inf->add_flag("--single-step", inf_single, "Skip localization and segment the full working grid");
  add_common(c_inf, common);

  // evaluate
  auto *c_ev = app.add_subcommand("evaluate", "Score predictions against ground truth");
  std::vector<std::string> ev_pred;
  std::string ev_out, ev_split, ev_part = "test";
  c_ev->add_option("--pred", ev_pred, "Prediction directory; repeat once per cross-validation run")->required();
  c_ev->add_option("--out", ev_out, "Output directory")->required();
  c_ev->add_option("--split", ev_split, "Split manifest selecting subjects");
  c_ev->add_option("--part", ev_part, "Split partition")->check(CLI::IsMember({"train", "val", "test"}));
  add_common(c_ev, common);

  // benchmark
  auto *c_bm = app.add_subcommand("benchmark", "Compare cascaded and single-step inference");
  std::string bm_loc, bm_seg, bm_split, bm_out;
  std::size_t bm_n = 10;
  c_bm->add_option("--localizer", bm_loc, "Localizer checkpoint")->required();
  c_bm->add_option("--segmenter", bm_seg, "Segmenter checkpoint")->required();
  c_bm->add_option("--split", bm_split, "Split manifest (test partition is used)");
  c_bm->add_option("--n", bm_n, "Number of subjects")->check(CLI::PositiveNumber);
  c_bm->add_option("--out", bm_out, "Report JSON");
  add_common(c_bm, common);

  // export
  auto *c_ex = app.add_subcommand("export", "Export a checkpoint to ONNX and check parity");
  std::string ex_ckpt, ex_out;
  std::vector<int> ex_patch;
  int ex_n = 5;
  double ex_tol = 1e-4;
  c_ex->add_option("--checkpoint", ex_ckpt, "Model checkpoint")->required();
  c_ex->add_option("--out", ex_out, "Output .onnx file")->required();
  c_ex->add_option("--patch", ex_patch, "Parity patch shape (default 128 128 32)")->expected(3);
  c_ex->add_option("--n", ex_n, "Parity patches")->check(CLI::PositiveNumber);
  c_ex->add_option("--tolerance", ex_tol, "Max abs difference allowed");
  add_common(c_ex, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*c_cfg) {
      PipelineConfig cfg = cfg_desk ? PipelineConfig::desk() : PipelineConfig();
      if (common.seed) cfg.apply_seed(*common.seed);
      save_config(cfg, cfg_out);
      return kOk;
    }

    if (*c_ph) {
      PhantomSpec spec = PhantomSpec::desk();
      if (!ph_spec.empty()) {
        std::ifstream in(ph_spec);
        if (!in) throw Error(ErrorKind::FileNotFound, ph_spec);
        try {
          spec = nlohmann::json::parse(in).get<PhantomSpec>();
        } catch (const nlohmann::json::exception &e) {
          throw Error(ErrorKind::SpecInvalid, e.what());
        }
      }
      const auto entries = generate_dataset(ph_n, spec, ph_seed, ph_out);
      std::cout << "wrote " << entries.size() << " subjects to " << ph_out << "\n";
      return kOk;
    }

    const PipelineConfig cfg = resolve(common);

    if (*c_tr) {
      const Stage stage = stage_from_string(tr_stage);
      const Dataset data = open_dataset(cfg.paths.data_dir);
      const Split split = load_or_make_split(cfg, data, tr_split);
      TrainOptions opts;
      opts.on_epoch = [](const EpochRecord &e) {
        std::cout << "epoch " << e.epoch << " train " << e.train_loss << " val " << e.val_loss << " lr " << e.lr
                  << (e.improved ? " *" : "") << " (" << std::fixed << std::setprecision(1) << e.seconds << "s)\n"
                  << std::defaultfloat << std::flush;
      };
      const StageRun run = train_stage(stage, cfg, data, split, cfg.paths.work_dir, opts);
      std::cout << to_string(stage) << ": best epoch " << run.result.history.best_epoch << " val loss "
                << run.result.history.best_val_loss << "; wrote " << run.checkpoint.string() << " and "
                << run.history_csv.string() << "\n";
      return kOk;
    }

    if (*c_inf) {
      CascadeOptions opt = cfg.cascade_options();
      opt.fallback_full_fov = opt.fallback_full_fov || inf_fallback;
      opt.single_step = inf_single;
      if (!inf_single && inf_loc.empty()) throw Error(ErrorKind::InvalidConfig, "--localizer is required unless --single-step");
      std::optional<UNet3D> loc;
      if (!inf_single) loc = UNet3D::load(inf_loc);
      const UNet3D seg = UNet3D::load(inf_seg);
      std::vector<SubjectRecord> subjects;
      if (!inf_t2w.empty() || !inf_t1w.empty()) {
        if (inf_t2w.empty() || inf_t1w.empty()) throw Error(ErrorKind::MissingContrast, "both --t2w and --t1w are required");
        SubjectRecord s;
        s.subject_id = inf_id;
        s.t2w = read_volume(inf_t2w);
        s.t1w_gd = read_volume(inf_t1w);
        subjects.push_back(std::move(s));
      } else {
        const Dataset data = open_dataset(cfg.paths.data_dir);
        for (std::size_t i : selected(data, inf_split, inf_part)) {
          SubjectRecord s = load_subject(data.entries[i]);
          s.gt.reset();
          subjects.push_back(std::move(s));
        }
      }
      for (const SubjectRecord &s : subjects) {
        const CascadeResult r = run_pipeline(loc ? &*loc : nullptr, seg, s, opt);
        if (r.used_fallback) std::cerr << "warning: " << s.subject_id << ": localization empty, segmented the full grid\n";
        write_prediction(r, s.subject_id, inf_out);
        print_timings(s.subject_id, r.timings);
      }
      return kOk;
    }

    if (*c_ev) {
      const Dataset data = open_dataset(cfg.paths.data_dir);
      const auto idx = selected(data, ev_split, ev_part);
      fs::create_directories(ev_out);
      std::vector<std::vector<SubjectMetrics>> runs;
      for (std::size_t k = 0; k < ev_pred.size(); ++k) {
        if (!fs::is_directory(ev_pred[k]) || fs::is_empty(ev_pred[k]))
          throw Error(ErrorKind::FileNotFound, "no predictions in " + ev_pred[k]);
        std::vector<SubjectMetrics> rows;
        for (std::size_t i : idx) {
          const SubjectRecord s = load_subject(data.entries[i]);
          const LabelSet pred = read_prediction(ev_pred[k], s.subject_id);
          if (cfg.metrics_at_native) {
            rows.push_back(evaluate_subject(pred, *s.gt, s.subject_id));
          } else {
            // score on the working lattice the model ran on
            SubjectRecord p = s;
            p.gt = pred;
            const WorkingSubject wp = preprocess_subject(p, cfg.preprocess);
            const WorkingSubject wg = preprocess_subject(s, cfg.preprocess);
            rows.push_back(evaluate_subject(*wp.gt, *wg.gt, s.subject_id));
          }
        }
        const std::string stem = "run" + std::to_string(k);
        write_metrics_csv(rows, fs::path(ev_out) / (stem + "_metrics.csv"));
        write_metrics_json(rows, fs::path(ev_out) / (stem + "_metrics.json"));
        runs.push_back(std::move(rows));
      }
      const AggregateReport rep = aggregate(runs);
      write_report_json(rep, fs::path(ev_out) / "report.json");
      std::cout << format_report(rep);
      return kOk;
    }

    if (*c_bm) {
      const Dataset data = open_dataset(cfg.paths.data_dir);
      auto idx = selected(data, bm_split, "test");
      if (idx.size() > bm_n) idx.resize(bm_n);
      const UNet3D loc = UNet3D::load(bm_loc), seg = UNet3D::load(bm_seg);
      CascadeOptions opt = cfg.cascade_options();
      const BenchmarkReport rep = benchmark(loc, seg, prepare_subjects(data, idx, cfg.preprocess), opt);
      for (const auto &r : rep.rows)
        std::cout << r.subject_id << ": cascaded " << r.cascaded_seconds << "s dice " << r.cascaded_whole_dice
                  << " | single-step " << r.single_seconds << "s dice " << r.single_whole_dice << "\n";
      std::cout << "mean: cascaded " << rep.mean_cascaded_seconds << "s dice " << rep.mean_cascaded_whole_dice
                << " | single-step " << rep.mean_single_seconds << "s dice " << rep.mean_single_whole_dice << "\n";
      if (!bm_out.empty()) {
        std::ofstream out(bm_out);
        if (!out) throw Error(ErrorKind::IoFailure, "cannot write " + bm_out);
        out << nlohmann::json(rep).dump(2) << "\n";
      }
      return kOk;
    }

    if (*c_ex) {
      const UNet3D model = UNet3D::load(ex_ckpt);
      onnx::save_model(model, ex_out);
      const Index3 patch = ex_patch.empty() ? Index3(128, 128, 32) : Index3(ex_patch[0], ex_patch[1], ex_patch[2]);
      const onnx::ParityReport r =
          onnx::check_parity(model, onnx::Graph::load(ex_out), patch, ex_n, cfg.seed, ex_tol);
      nlohmann::json j{{"model", ex_out},
                       {"patch", {patch[0], patch[1], patch[2]}},
                       {"max_abs_diff", r.max_abs_diff},
                       {"worst", r.worst},
                       {"tolerance", r.tolerance},
                       {"passed", r.passed}};
      std::ofstream(ex_out + ".parity.json") << j.dump(2) << "\n";
      std::cout << "exported " << ex_out << "; parity max abs diff " << r.worst << " (tolerance " << r.tolerance
                << ") " << (r.passed ? "pass" : "FAIL") << "\n";
      if (!r.passed) throw Error(ErrorKind::ExportParityFailure, "exported model disagrees with the checkpoint");
      return kOk;
    }
  } catch (const Error &e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
