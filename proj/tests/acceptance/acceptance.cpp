// Acceptance suite: one PASS/FAIL line per criterion.
//
//   cordseg_acceptance [--only N]... [--work DIR] [--force] [--budget-hours H]

#include <CLI11.hpp>

#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cordseg/config.hpp"
#include "cordseg/losses.hpp"
#include "cordseg/metrics.hpp"
#include "cordseg/onnx.hpp"
#include "cordseg/patching.hpp"
#include "cordseg/phantom.hpp"
#include "cordseg/postprocess.hpp"
#include "cordseg/workflow.hpp"

#include "oracles.hpp"

using namespace cordseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool pass = false;
  std::string summary;
};

struct Context {
  fs::path work;
  bool force = false;
  double budget_hours = 6.0;
};

void info(const std::string &s) { std::cout << "    " << s << std::endl; }

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool close_rel(double a, double b, double rel) {
  if (a == b) return true;
  return std::abs(a - b) <= rel * std::max(std::abs(a), std::abs(b));
}

Mask to_mask(const oracle::Grid3 &g) {
  Mask m(g.nx, g.ny, g.nz);
  std::memcpy(m.data(), g.v.data(), g.v.size());
  return m;
}

// ---------------------------------------------------------------------------
// 1. metrics

Outcome c1_metrics(const Context &) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  const int n_cases = 10000;
  const std::array<Spacing3, 4> fixed{Spacing3(1, 1, 2), Spacing3(1, 1, 1), Spacing3(0.5, 0.5, 3), Spacing3(2, 1.5, 1)};
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  double worst = 0.0;
  long mismatches = 0, tp_cases = 0, fp_cases = 0;
  auto note = [&](bool ok) { mismatches += ok ? 0 : 1; };
  auto cmp_opt = [&](const std::optional<double> &a, const std::optional<double> &b) {
    if (a.has_value() != b.has_value()) return note(false);
    if (!a) return;
    if (*a != *b) worst = std::max(worst, std::abs(*a - *b) / std::max(std::abs(*a), std::abs(*b)));
    note(close_rel(*a, *b, 1e-12));
  };
  for (int k = 0; k < n_cases; ++k) {
    const int nx = 1 + int(rng() % 8), ny = 1 + int(rng() % 8), nz = 1 + int(rng() % 4);
    oracle::Grid3 p(nx, ny, nz), g(nx, ny, nz);
    // densities cover empty, sparse and full masks
    const double dp = k % 10 == 0 ? 0.0 : unit(rng), dg = k % 7 == 0 ? 0.0 : unit(rng);
    for (auto &v : p.v) v = unit(rng) < dp;
    for (auto &v : g.v) v = unit(rng) < dg;
    const Spacing3 sp = k % 2 ? fixed[k / 2 % 4] : Spacing3(0.2 + 2.8 * unit(rng), 0.2 + 2.8 * unit(rng), 0.2 + 2.8 * unit(rng));
    const double vox = sp[0] * sp[1] * sp[2];
    const Mask pm = to_mask(p), gm = to_mask(g);
    const oracle::Counts c = oracle::count(p, g);

    const double d = dice_score(pm, gm);
    worst = std::max(worst, d == oracle::dice(c) ? 0.0 : std::abs(d - oracle::dice(c)));
    note(close_rel(d, oracle::dice(c), 1e-12));
    note(dice_score(gm, pm) == d);

    const Detection det = detection(pm, gm, sp);
    const oracle::Det od = oracle::detection(c, vox);
    note(det.tp == od.tp && det.fp == od.fp);
    tp_cases += od.tp.has_value();
    fp_cases += od.fp.has_value();

    const auto [prec, rec] = precision_recall(pm, gm);
    cmp_opt(prec, oracle::precision(c));
    cmp_opt(rec, oracle::recall(c));

    const auto rel = oracle::rel_vol_diff(c, vox);
    if (rel) {
      const VolumeDifference v = volume_differences(pm, gm, sp);
      cmp_opt(v.rel, rel);
      cmp_opt(v.abs, std::abs(*rel));
    } else {
      bool threw = false;
      try {
        volume_differences(pm, gm, sp);
      } catch (const Error &e) {
        threw = e.kind() == ErrorKind::UndefinedForEmptyGT;
      }
      note(threw);
    }
  }
  // the 6 mm3 boundary at spacing (1,1,2): 3 overlapping voxels detect, 2 do not
  for (int overlap : {2, 3}) {
    Mask p(4, 4, 2), g(4, 4, 2);
    p.setZero();
    g.setZero();
    for (int i = 0; i < 4; ++i) g(i, 0, 0) = 1;
    for (int i = 0; i < overlap; ++i) p(i, 0, 0) = 1;
    note(detection(p, g, Spacing3(1, 1, 2)).tp == std::optional<bool>(overlap == 3));
  }
  const double secs = seconds_since(t0);
  const bool pass = mismatches == 0 && secs < 60.0;
  return {pass, std::to_string(n_cases) + " random masks (" + std::to_string(tp_cases) + " with GT, " +
                    std::to_string(fp_cases) + " without), " + std::to_string(mismatches) +
                    " mismatches, max rel err " + fmt(worst) + ", " + fmt(secs) + " s (limit 60 s)"};
}

// ---------------------------------------------------------------------------
// 2. postprocessing

std::vector<float> random_soft(std::mt19937_64 &rng, int nx, int ny, int nz) {
  // a few random blobs plus noise: components of many sizes, some with holes
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<float> out(std::size_t(nx) * ny * nz, 0.f);
  const int blobs = int(rng() % 6);
  std::vector<std::array<double, 5>> b;
  for (int i = 0; i < blobs; ++i)
    b.push_back({u(rng) * nx, u(rng) * ny, u(rng) * nz, 1.0 + 5.0 * u(rng), u(rng) < 0.3 ? 1.0 : 0.0});
  const double noise = u(rng) * 0.6;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        double v = 0;
        for (const auto &s : b) {
          const double r = std::sqrt((x - s[0]) * (x - s[0]) + (y - s[1]) * (y - s[1]) + 4.0 * (z - s[2]) * (z - s[2]));
          // shells (s[4]) leave an enclosed core below threshold
          v = std::max(v, s[4] > 0 ? (std::abs(r - s[3]) < 1.2 ? 0.9 : 0.1) : (r < s[3] ? 0.8 : 0.2));
        }
        v += noise * (u(rng) - 0.5);
        out[(std::size_t(z) * ny + y) * nx + x] = float(std::clamp(v, 0.0, 1.0));
      }
  return out;
}

Outcome c2_postprocess(const Context &) {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(202);
  const int nx = 16, ny = 16, nz = 8, n_cases = 1000;
  Geometry geom;
  geom.shape = {nx, ny, nz};
  geom.spacing = {1, 1, 2};
  const PostprocessRules rules;
  long mismatched_masks = 0, removed_components = 0;
  for (int k = 0; k < n_cases; ++k) {
    LabelSet soft(geom);
    std::array<std::vector<float>, kNumClasses> raw;
    for (int c = 0; c < kNumClasses; ++c) {
      raw[c] = random_soft(rng, nx, ny, nz);
      std::memcpy(soft.masks[c].data(), raw[c].data(), raw[c].size() * sizeof(float));
    }
    const LabelSet out = apply_rules(soft, rules);
    for (int c = 0; c < kNumClasses; ++c) {
      const oracle::Grid3 ref =
          oracle::postprocess(raw[c], nx, ny, nz, rules.threshold, rules.fill_holes, rules.min_volume_mm3[c], 2.0);
      const oracle::Grid3 filled = oracle::fill_holes(oracle::binarize(raw[c], nx, ny, nz, rules.threshold));
      for (std::size_t i = 0; i < ref.v.size(); ++i) removed_components += filled.v[i] && !ref.v[i];
      bool same = true;
      for (std::size_t i = 0; i < ref.v.size() && same; ++i) same = float(ref.v[i]) == out.masks[c].data()[i];
      mismatched_masks += !same;
    }
  }

  // boundary components: first n voxels of a raster-filled slab
  long boundary_failures = 0;
  for (int c = 0; c < kNumClasses; ++c) {
    const int keep = int(rules.min_volume_mm3[c] / 2.0); // voxels at 2 mm3
    for (int n : {keep - 1, keep}) {
      LabelSet soft(geom);
      int placed = 0;
      for (int z = 1; z < nz && placed < n; ++z)
        for (int y = 0; y < ny && placed < n; ++y)
          for (int x = 0; x < nx && placed < n; ++x, ++placed) soft.masks[c](x, y, z) = 0.9f;
      const LabelSet out = apply_rules(soft, rules);
      const double kept = Eigen::Tensor<float, 0>(out.masks[c].sum())();
      boundary_failures += kept != (n >= keep ? double(n) : 0.0);
    }
  }
  const double secs = seconds_since(t0);
  const bool pass = mismatched_masks == 0 && boundary_failures == 0 && secs < 120.0;
  return {pass, std::to_string(n_cases) + " random 16x16x8 label sets (" + std::to_string(removed_components) +
                    " voxels removed by the size rule), " + std::to_string(mismatched_masks) +
                    " mismatched masks; 99/100 and 249/250-voxel boundary cases " +
                    (boundary_failures ? "FAILED" : "exact") + "; " + fmt(secs) + " s (limit 120 s)"};
}

// ---------------------------------------------------------------------------
// 3. losses

Outcome c3_losses(const Context &) {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<float> u(0.02f, 0.98f);
  const double h = 1e-4;
  const DiceOptions opt;
  double worst_rel = 0.0;
  long checked = 0;
  for (int k = 0; k < 100; ++k) {
    const int n = 64;
    std::vector<float> p(n), g(n), grad(n, 0.f);
    const double density = k % 10 == 0 ? 0.0 : (k % 5 + 1) / 6.0;
    for (int i = 0; i < n; ++i) {
      p[i] = u(rng);
      g[i] = std::uniform_real_distribution<double>(0, 1)(rng) < density ? 1.f : 0.f;
    }
    dice_loss(p.data(), g.data(), n, opt, grad.data());
    for (int i = 0; i < n; ++i) {
      std::vector<float> a = p, b = p;
      a[i] = float(p[i] + h);
      b[i] = float(p[i] - h);
      const double step = double(a[i]) - double(b[i]); // representable step
      const double fd = (dice_loss(a.data(), g.data(), n, opt) - dice_loss(b.data(), g.data(), n, opt)) / step;
      const double an = grad[i];
      const double scale = std::max(std::abs(an), std::abs(fd));
      if (scale > 0) worst_rel = std::max(worst_rel, std::abs(an - fd) / scale);
      ++checked;
    }
  }

  // multiclass value is the mean of per-class losses
  double worst_mean = 0.0, worst_oracle = 0.0;
  Geometry geom;
  geom.shape = {4, 4, 4};
  for (int k = 0; k < 100; ++k) {
    LabelSet pred(geom), gt(geom);
    std::array<std::vector<float>, kNumClasses> pv, gv;
    for (int c = 0; c < kNumClasses; ++c) {
      pv[c].resize(64);
      gv[c].resize(64);
      for (int i = 0; i < 64; ++i) {
        pv[c][i] = pred.masks[c].data()[i] = u(rng);
        gv[c][i] = gt.masks[c].data()[i] = (rng() % 3 == 0) ? 1.f : 0.f;
      }
    }
    const LossValue lv = multiclass_dice_loss(pred, gt, opt);
    double mean = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      mean += (*lv.per_class)[c] / kNumClasses;
      worst_oracle = std::max(worst_oracle, std::abs((*lv.per_class)[c] - oracle::dice_loss(pv[c], gv[c], opt.smooth)));
    }
    worst_mean = std::max(worst_mean, std::abs(lv.value - mean));
    // network-output form agrees with the label-set form
    FeatureMap fp = label_channels(pred), fg = label_channels(gt), fgrad;
    worst_mean = std::max(worst_mean, std::abs(multiclass_dice_loss(fp, fg, &fgrad, opt).value - lv.value));
  }
  const bool pass = worst_rel <= 1e-3 && worst_mean <= 1e-12 && worst_oracle <= 1e-12;
  return {pass, std::to_string(checked) + " gradient entries on 100 random 4x4x4 instances, max rel err " +
                    fmt(worst_rel) + " (limit 1e-3); multiclass mean deviation " + fmt(worst_mean) +
                    ", per-class vs oracle " + fmt(worst_oracle) + " (limit 1e-12)"};
}

// ---------------------------------------------------------------------------
// 4. patching

Outcome c4_patching(const Context &) {
  std::mt19937_64 rng(404);
  std::normal_distribution<float> nd(0.f, 1.f);
  const Index3 big_patch{128, 128, 32}, big_stride{64, 64, 32};
  int exact = 0, total = 0, non_divisible = 0;
  for (int k = 0; k < 50; ++k) {
    Index3 shape, patch, stride;
    if (k == 0) {
      shape = {200, 130, 33};
      patch = big_patch;
      stride = big_stride;
    } else if (k < 10) {
      shape = {int(60 + rng() % 200), int(40 + rng() % 160), int(8 + rng() % 40)};
      patch = big_patch;
      stride = big_stride;
    } else {
      patch = {int(4 + rng() % 13), int(4 + rng() % 13), int(2 + rng() % 7)};
      stride = {int(1 + rng() % patch[0]), int(1 + rng() % patch[1]), int(1 + rng() % patch[2])};
      shape = {int(1 + rng() % 40), int(1 + rng() % 40), int(1 + rng() % 16)};
    }
    const int ch = 1 + int(rng() % 3);
    FeatureMap v(shape[0], shape[1], shape[2], ch);
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = nd(rng);
    const PatchGrid grid = plan_grid(shape, patch, stride);
    bool divisible = true;
    for (int a = 0; a < 3; ++a) divisible = divisible && shape[a] >= patch[a] && (shape[a] - patch[a]) % stride[a] == 0;
    non_divisible += !divisible;
    const FeatureMap back = stitch(extract(v, grid), grid);
    ++total;
    exact += back.dimensions() == v.dimensions() && std::memcmp(back.data(), v.data(), sizeof(float) * v.size()) == 0;
  }

  // two patches overlapping on x in [64, 128): 0 and 1 average to exactly 0.5
  const PatchGrid two = plan_grid({192, 128, 32}, big_patch, big_stride);
  bool half = two.positions.size() == 2;
  if (half) {
    Stitcher st(two, 1);
    FeatureMap zero(128, 128, 32, 1), one(128, 128, 32, 1);
    zero.setZero();
    one.setConstant(1.f);
    const std::size_t first = two.positions[0][0] == 0 ? 0 : 1;
    st.add(first, zero);
    st.add(1 - first, one);
    const FeatureMap r = st.result();
    for (int x = 0; x < 192 && half; ++x) {
      const float want = x < 64 ? 0.f : x < 128 ? 0.5f : 1.f;
      for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 128; ++y) half = half && r(x, y, z, 0) == want;
    }
  }
  const bool pass = exact == total && half;
  return {pass, std::to_string(exact) + "/" + std::to_string(total) + " volumes bit-exact (" +
                    std::to_string(non_divisible) + " not stride-divisible, incl. 200x130x33 at 128x128x32/64x64x32); "
                    "two-patch overlap " + (half ? "exactly 0.5" : "WRONG")};
}

// ---------------------------------------------------------------------------
// 5. model contract

struct ContractCheck {
  bool shape_ok = true, range_ok = true;
  long params = 0, zero_grads = 0, nonfinite = 0;
  double seconds = 0;
};

ContractCheck model_contract(const ModelConfig &cfg, const Index3 &shape, int batch, std::uint64_t seed) {
  const auto t0 = Clock::now();
  ContractCheck r;
  UNet3D m(cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.f, 1.f);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  m.zero_grad();
  Adam adam(m.parameters(), 0.9, 0.999, 1e-8);
  for (int b = 0; b < batch; ++b) {
    FeatureMap x(shape[0], shape[1], shape[2], cfg.in_channels), t(shape[0], shape[1], shape[2], cfg.out_channels);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng) < 0.3f ? 1.f : 0.f;
    const FeatureMap y = m.forward_train(x, seed + b + 1);
    r.shape_ok = r.shape_ok && y.dimension(0) == shape[0] && y.dimension(1) == shape[1] &&
                 y.dimension(2) == shape[2] && y.dimension(3) == cfg.out_channels;
    for (Eigen::Index i = 0; i < y.size(); ++i) r.range_ok = r.range_ok && y.data()[i] > 0.f && y.data()[i] < 1.f;
    FeatureMap grad;
    multiclass_dice_loss(y, t, &grad);
    grad = grad * (1.f / float(batch));
    m.backward(grad);
  }
  for (const Parameter &p : m.parameters())
    for (Eigen::Index i = 0; i < p.grad.size(); ++i) {
      const float g = p.grad.data()[i];
      ++r.params;
      r.zero_grads += g == 0.f;
      r.nonfinite += !std::isfinite(g);
    }
  adam.step(m.parameters(), 1e-3);
  // eval-mode forward also stays inside (0,1)
  FeatureMap x(shape[0], shape[1], shape[2], cfg.in_channels);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = nd(rng);
  const FeatureMap y = m.forward(x);
  for (Eigen::Index i = 0; i < y.size(); ++i) r.range_ok = r.range_ok && y.data()[i] > 0.f && y.data()[i] < 1.f;
  r.seconds = seconds_since(t0);
  return r;
}

Outcome c5_model(const Context &) {
  ModelConfig loc = ModelConfig::localizer(), seg = ModelConfig::segmenter();
  loc.seed = 5;
  seg.seed = 6;
  const ContractCheck a = model_contract(loc, {512, 256, 32}, 1, 51);
  info("localizer 1->1 512x256x32 batch 1: " + std::to_string(a.params) + " parameters, " +
       std::to_string(a.zero_grads) + " zero / " + std::to_string(a.nonfinite) + " non-finite gradients, " +
       fmt(a.seconds) + " s");
  const ContractCheck b = model_contract(seg, {128, 128, 32}, 8, 52);
  info("segmenter 2->4 128x128x32 batch 8: " + std::to_string(b.params) + " parameters, " +
       std::to_string(b.zero_grads) + " zero / " + std::to_string(b.nonfinite) + " non-finite gradients, " +
       fmt(b.seconds) + " s");
  const bool pass = a.shape_ok && b.shape_ok && a.range_ok && b.range_ok && a.zero_grads + b.zero_grads == 0 &&
                    a.nonfinite + b.nonfinite == 0;
  return {pass, std::string("shapes ") + (a.shape_ok && b.shape_ok ? "preserved" : "WRONG") + ", outputs " +
                    (a.range_ok && b.range_ok ? "in (0,1)" : "OUT OF (0,1)") + ", " +
                    std::to_string(a.zero_grads + b.zero_grads) + " zero and " +
                    std::to_string(a.nonfinite + b.nonfinite) + " non-finite gradient entries over " +
                    std::to_string(a.params + b.params) + " parameters"};
}

// ---------------------------------------------------------------------------
// desk-scale fixtures

fs::path desk_data(const Context &ctx) {
  const fs::path dir = ctx.work / "desk";
  const PhantomSpec spec = PhantomSpec::desk();
  if (fs::exists(dir / "phantom_spec.json")) {
    const auto j = nlohmann::json::parse(slurp(dir / "phantom_spec.json"));
    if (j.value("n", -1) == PhantomSpec::kDeskSubjects && j.value("dataset_seed", -1) == 0) return dir;
  }
  fs::remove_all(dir);
  info("generating " + std::to_string(PhantomSpec::kDeskSubjects) + " desk phantoms in " + dir.string());
  generate_dataset(PhantomSpec::kDeskSubjects, spec, 0, dir);
  return dir;
}

struct Projection {
  double hours = 0;
  std::string breakdown;
};

// Times one training step and one validation pass per stage on real desk
// subjects and scales by the per-epoch counts.
Projection project_c6(const PipelineConfig &cfg, const Dataset &data, const Split &split) {
  // subjects are preprocessed one at a time; full-size working volumes do
  // not fit in memory together
  auto loc_train = std::make_shared<std::vector<LocalizerItem>>(), loc_val = std::make_shared<std::vector<LocalizerItem>>();
  auto seg_train = std::make_shared<std::vector<SegmenterItem>>(), seg_val = std::make_shared<std::vector<SegmenterItem>>();
  std::size_t seg_train_patches = 0, seg_val_patches = 0, kept_patches = 0;
  const std::size_t batch = std::size_t(cfg.segmenter_train.batch_size);
  for (std::size_t i : split.train) {
    const WorkingSubject w = prepare_subjects(data, {i}, cfg.preprocess).front();
    SegmenterItem it = make_segmenter_item(w, cfg.patches, cfg.train_crop_margin_mm);
    seg_train_patches += it.grid.positions.size();
    if (loc_train->empty()) loc_train->push_back(make_localizer_item(w));
    if (kept_patches < batch) {
      kept_patches += it.grid.positions.size();
      seg_train->push_back(std::move(it));
    }
  }
  for (std::size_t i : split.val) {
    const WorkingSubject w = prepare_subjects(data, {i}, cfg.preprocess).front();
    SegmenterItem it = make_segmenter_item(w, cfg.patches, cfg.train_crop_margin_mm);
    seg_val_patches += it.grid.positions.size();
    if (loc_val->empty()) {
      loc_val->push_back(make_localizer_item(w));
      seg_val->push_back(std::move(it));
    }
  }

  auto time_stage = [&](Stage stage) {
    double step = 0, eval = 0;
    const SampleSource tr = stage == Stage::Localizer ? localizer_samples(loc_train, cfg.augment, true)
                                                      : segmenter_samples(seg_train, cfg.augment, true);
    const SampleSource va = stage == Stage::Localizer ? localizer_samples(loc_val, cfg.augment, false)
                                                      : segmenter_samples(seg_val, cfg.augment, false);
    TrainConfig tc = stage == Stage::Localizer ? cfg.localizer_train : cfg.segmenter_train;
    tc.max_epochs = 1;
    tc.patience = 1;
    TrainOptions o;
    o.on_step = [&](const StepInfo &s) {
      if (s.step == 0) step = s.seconds;
      return s.step == 0; // one step is enough
    };
    train(UNet3D(stage == Stage::Localizer ? cfg.localizer_model : cfg.segmenter_model), tr, va, tc,
          dice_loss_fn(cfg.loss), o);
    // evaluation-mode pass over one validation subject
    const auto t1 = Clock::now();
    evaluate_loss(UNet3D(stage == Stage::Localizer ? cfg.localizer_model : cfg.segmenter_model), va,
                  dice_loss_fn(cfg.loss));
    eval = seconds_since(t1) / double(va.size);
    return std::pair{step, eval};
  };
  const auto [loc_step, loc_eval] = time_stage(Stage::Localizer);
  const auto [seg_step, seg_eval] = time_stage(Stage::Segmenter);
  const double loc_epoch = double(split.train.size()) / cfg.localizer_train.batch_size * loc_step +
                           double(split.val.size()) * loc_eval;
  const double seg_epoch =
      double(seg_train_patches / std::size_t(cfg.segmenter_train.batch_size)) * seg_step + double(seg_val_patches) * seg_eval;
  const double total = cfg.localizer_train.max_epochs * loc_epoch + cfg.segmenter_train.max_epochs * seg_epoch;
  Projection p;
  p.hours = total / 3600.0;
  std::ostringstream s;
  s << "localizer " << fmt(loc_step) << " s/step x " << split.train.size() << " steps + " << split.val.size()
    << " x " << fmt(loc_eval) << " s val = " << fmt(loc_epoch / 60) << " min/epoch; segmenter " << fmt(seg_step)
    << " s/step x " << seg_train_patches / std::size_t(cfg.segmenter_train.batch_size) << " steps ("
    << seg_train_patches << " patches) + " << seg_val_patches << " x " << fmt(seg_eval) << " s val = "
    << fmt(seg_epoch / 60) << " min/epoch; x " << cfg.localizer_train.max_epochs << " epochs";
  p.breakdown = s.str();
  return p;
}

struct DeskRun {
  EvaluationSummary summary;
  double seconds = 0;
};

// The full desk run: split, both stages, test-split evaluation. Writes
// split.json, histories, checkpoints and metrics.json into `dir`.
DeskRun run_desk(const PipelineConfig &cfg, const Dataset &data, const fs::path &dir) {
  const auto t0 = Clock::now();
  fs::create_directories(dir);
  const Split split = split_dataset(data.entries, cfg.split);
  write_split(split, data, dir / "split.json");
  TrainOptions o;
  o.on_epoch = [](const EpochRecord &e) {
    info("epoch " + std::to_string(e.epoch) + " train " + fmt(e.train_loss, 4) + " val " + fmt(e.val_loss, 4) + " (" +
         fmt(e.seconds) + " s)");
  };
  const StageRun loc = train_stage(Stage::Localizer, cfg, data, split, dir, o);
  const StageRun seg = train_stage(Stage::Segmenter, cfg, data, split, dir, o);
  CascadeOptions opt = cfg.cascade_options();
  opt.fallback_full_fov = true;
  std::vector<SubjectEvaluation> evals;
  for (std::size_t i : split.test)
    evals.push_back(evaluate_pipeline(&loc.result.model, seg.result.model, load_subject(data.entries[i]), opt));
  DeskRun r{summarize(std::move(evals)), seconds_since(t0)};
  std::ofstream(dir / "metrics.json") << nlohmann::json(r.summary).dump(2) << "\n";
  return r;
}

// ---------------------------------------------------------------------------
// 6. end-to-end

Outcome c6_end_to_end(const Context &ctx) {
  const PipelineConfig cfg = PipelineConfig::desk();
  const Dataset data = open_dataset(desk_data(ctx));
  const Split split = split_dataset(data.entries, cfg.split);
  const std::string sizes = std::to_string(split.train.size()) + "/" + std::to_string(split.val.size()) + "/" +
                            std::to_string(split.test.size());
  info("split " + sizes);
  const Projection proj = project_c6(cfg, data, split);
  info("projected training time " + fmt(proj.hours) + " h: " + proj.breakdown);
  if (proj.hours > ctx.budget_hours && !ctx.force)
    return {false, "not run: projected " + fmt(proj.hours) + " h of CPU training exceeds the " +
                       fmt(ctx.budget_hours) + " h budget (rerun with --force to train anyway)"};

  const DeskRun r = run_desk(cfg, data, ctx.work / "c6");
  const EvaluationSummary &s = r.summary;
  const double cord = s.mean_cord_dice.value_or(0.0), whole = s.mean_dice[3].value_or(0.0),
               tumor = s.mean_dice[0].value_or(0.0);
  const bool pass = split.train.size() == 36 && split.val.size() == 12 && split.test.size() == 12 && cord >= 0.85 &&
                    whole >= 0.70 && tumor >= 0.55 && s.inclusion_rate() >= 0.95 &&
                    r.seconds <= ctx.budget_hours * 3600.0;
  return {pass, "split " + sizes + ", cord Dice " + fmt(cord) + " (>=0.85), whole " + fmt(whole) + " (>=0.70), tumor " +
                    fmt(tumor) + " (>=0.55), bbox inclusion " + fmt(100 * s.inclusion_rate()) + "% (>=95%), " +
                    fmt(r.seconds / 3600.0) + " h (<=" + fmt(ctx.budget_hours) + " h)"};
}

// ---------------------------------------------------------------------------
// 7. cascade vs single step

constexpr int kReducedLocalizerEpochs = 4, kReducedSegmenterEpochs = 8;

// Trained checkpoints for the benchmark: the full desk run when present,
// otherwise a reduced run (same data and hyperparameters, fewer epochs),
// cached in the work directory.
std::pair<UNet3D, UNet3D> benchmark_models(const Context &ctx, const Dataset &data, std::string &source) {
  const fs::path full = ctx.work / "c6";
  if (fs::exists(full / "localizer.ckpt") && fs::exists(full / "segmenter.ckpt") && fs::exists(full / "metrics.json")) {
    source = "criterion-6 checkpoints";
    return {UNet3D::load(full / "localizer.ckpt"), UNet3D::load(full / "segmenter.ckpt")};
  }
  PipelineConfig cfg = PipelineConfig::desk();
  cfg.localizer_train.max_epochs = cfg.localizer_train.patience = kReducedLocalizerEpochs;
  cfg.segmenter_train.max_epochs = cfg.segmenter_train.patience = kReducedSegmenterEpochs;
  const fs::path dir = ctx.work / "reduced";
  const std::string stamp = nlohmann::json(cfg).dump();
  source = "reduced training (" + std::to_string(kReducedLocalizerEpochs) + " localizer / " +
           std::to_string(kReducedSegmenterEpochs) + " segmenter epochs)";
  if (fs::exists(dir / "config.json") && slurp(dir / "config.json") == stamp && fs::exists(dir / "localizer.ckpt") &&
      fs::exists(dir / "segmenter.ckpt"))
    return {UNet3D::load(dir / "localizer.ckpt"), UNet3D::load(dir / "segmenter.ckpt")};
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Split split = split_dataset(data.entries, cfg.split);
  TrainOptions o;
  o.on_epoch = [](const EpochRecord &e) {
    info("epoch " + std::to_string(e.epoch) + " train " + fmt(e.train_loss, 4) + " val " + fmt(e.val_loss, 4) + " (" +
         fmt(e.seconds) + " s)");
  };
  info("training localizer for " + std::to_string(kReducedLocalizerEpochs) + " epochs");
  StageRun loc = train_stage(Stage::Localizer, cfg, data, split, dir, o);
  info("training segmenter for " + std::to_string(kReducedSegmenterEpochs) + " epochs");
  StageRun seg = train_stage(Stage::Segmenter, cfg, data, split, dir, o);
  std::ofstream(dir / "config.json") << stamp;
  return {std::move(loc.result.model), std::move(seg.result.model)};
}

Outcome c7_cascade_direction(const Context &ctx) {
  const PipelineConfig cfg = PipelineConfig::desk();
  const Dataset data = open_dataset(desk_data(ctx));
  std::string source;
  const auto [loc, seg] = benchmark_models(ctx, data, source);
  info("models: " + source);
  const Split split = split_dataset(data.entries, cfg.split);
  std::vector<std::size_t> idx = split.test;
  idx.resize(std::min<std::size_t>(idx.size(), 10));
  CascadeOptions opt = cfg.cascade_options();
  opt.fallback_full_fov = true;
  const BenchmarkReport rep = benchmark(loc, seg, prepare_subjects(data, idx, cfg.preprocess), opt);
  int fallbacks = 0;
  for (const auto &r : rep.rows) {
    fallbacks += r.used_fallback;
    info(r.subject_id + ": cascaded " + fmt(r.cascaded_seconds) + " s, whole Dice " + fmt(r.cascaded_whole_dice) +
         " | single-step " + fmt(r.single_seconds) + " s, whole Dice " + fmt(r.single_whole_dice) +
         (r.used_fallback ? " (localization empty, full grid)" : ""));
  }
  const bool pass = rep.rows.size() == 10 && rep.mean_cascaded_seconds < rep.mean_single_seconds &&
                    rep.mean_cascaded_whole_dice >= rep.mean_single_whole_dice - 0.02;
  return {pass, std::to_string(rep.rows.size()) + " inferences: cascaded " + fmt(rep.mean_cascaded_seconds) +
                    " s/image vs single-step " + fmt(rep.mean_single_seconds) + " s/image; whole Dice " +
                    fmt(rep.mean_cascaded_whole_dice) + " vs " + fmt(rep.mean_single_whole_dice) +
                    " (cascaded >= single - 0.02); " + std::to_string(fallbacks) + " localization fallbacks"};
}

// ---------------------------------------------------------------------------
// 8. export parity

Outcome c8_export(const Context &ctx) {
  struct Item {
    std::string name;
    std::optional<UNet3D> model;
    Index3 patch;
  };
  std::vector<Item> items;
  for (const std::string stage : {"localizer", "segmenter"}) {
    Item it{stage, std::nullopt, stage == "localizer" ? Index3(512, 256, 32) : Index3(128, 128, 32)};
    for (const fs::path dir : {ctx.work / "c6", ctx.work / "reduced"})
      if (!it.model && fs::exists(dir / (stage + ".ckpt"))) {
        it.model = UNet3D::load(dir / (stage + ".ckpt"));
        it.name += " (" + (dir / (stage + ".ckpt")).string() + ")";
      }
    if (!it.model) {
      ModelConfig c = stage == "localizer" ? ModelConfig::localizer() : ModelConfig::segmenter();
      c.seed = 8;
      it.model.emplace(c);
      it.name += " (freshly initialized)";
    }
    items.push_back(std::move(it));
  }
  fs::create_directories(ctx.work / "export");
  bool pass = true;
  std::string summary;
  for (const Item &it : items) {
    const fs::path file = ctx.work / "export" / (it.name.substr(0, it.name.find(' ')) + ".onnx");
    onnx::save_model(*it.model, file);
    const onnx::ParityReport r = onnx::check_parity(*it.model, onnx::Graph::load(file), it.patch, 5, 88);
    std::string diffs;
    for (double d : r.max_abs_diff) diffs += (diffs.empty() ? "" : ", ") + fmt(d);
    info(it.name + ": per-patch max abs diff [" + diffs + "]");
    pass = pass && r.passed && r.max_abs_diff.size() == 5;
    summary += (summary.empty() ? "" : "; ") + it.name.substr(0, it.name.find(' ')) + " max abs diff " + fmt(r.worst);
  }
  return {pass, summary + " over 5 random patches each (limit 1e-4)"};
}

// ---------------------------------------------------------------------------
// 9. determinism

// Same pipeline as the desk run on a small phantom set with tiny models.
std::string small_run(const fs::path &dir) {
  fs::remove_all(dir);
  PhantomSpec ps;
  ps.shape = {96, 40, 8};
  ps.native_spacing = {1.0, 1.0, 2.0};
  generate_dataset(10, ps, 9, dir / "data");
  PipelineConfig cfg;
  cfg.preprocess.crop_shape = {112, 48, 8};
  cfg.patches.patch_size = {32, 32, 8};
  cfg.patches.stride = {16, 16, 8};
  for (ModelConfig *m : {&cfg.localizer_model, &cfg.segmenter_model}) {
    m->depth = 2;
    m->base_filters = 4;
  }
  for (TrainConfig *t : {&cfg.localizer_train, &cfg.segmenter_train}) {
    t->max_epochs = 3;
    t->patience = 3;
  }
  cfg.segmenter_train.batch_size = 2;
  run_desk(cfg, open_dataset(dir / "data"), dir / "run");
  std::string all;
  for (const char *f : {"split.json", "localizer_history.csv", "segmenter_history.csv", "metrics.json"})
    all += slurp(dir / "run" / f) + "\n--\n";
  return all;
}

Outcome c9_determinism(const Context &ctx) {
  const std::string a = small_run(ctx.work / "det_a"), b = small_run(ctx.work / "det_b");
  info(std::string("reduced-scale repeat (10 small phantoms, tiny models): split, histories and metrics ") +
       (a == b ? "identical" : "DIFFER"));
  const PipelineConfig cfg = PipelineConfig::desk();
  const Dataset data = open_dataset(desk_data(ctx));
  const Split split = split_dataset(data.entries, cfg.split);
  if (!ctx.force) {
    const Projection proj = project_c6(cfg, data, split);
    if (proj.hours > ctx.budget_hours)
      return {false, "not run: needs two full criterion-6 runs, projected " + fmt(proj.hours) + " h each against a " +
                         fmt(ctx.budget_hours) + " h budget (reduced-scale repeat " +
                         (a == b ? "identical" : "differs") + "; --force runs both)"};
  }
  run_desk(cfg, data, ctx.work / "c9_a");
  run_desk(cfg, data, ctx.work / "c9_b");
  std::vector<std::string> differ;
  for (const char *f : {"split.json", "localizer_history.csv", "segmenter_history.csv", "metrics.json"})
    if (slurp(ctx.work / "c9_a" / f) != slurp(ctx.work / "c9_b" / f)) differ.push_back(f);
  std::string d;
  for (const auto &f : differ) d += " " + f;
  return {differ.empty() && a == b, differ.empty() ? "two desk runs: split manifest, histories and metrics identical"
                                                   : "two desk runs differ in:" + d};
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"cordseg acceptance suite"};
  std::vector<int> only;
  Context ctx;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "Run only these criteria (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--work", work, "Scratch directory for datasets and checkpoints");
  app.add_flag("--force", ctx.force, "Run the end-to-end training even when projected over budget");
  app.add_option("--budget-hours", ctx.budget_hours, "CPU budget for the end-to-end run");
  CLI11_PARSE(app, argc, argv);
  ctx.work = work;
  fs::create_directories(ctx.work);

  const std::vector<std::pair<std::string, std::function<Outcome(const Context &)>>> criteria{
      {"metrics oracle equivalence", c1_metrics},
      {"postprocessing oracle equivalence", c2_postprocess},
      {"loss correctness", c3_losses},
      {"patching exactness", c4_patching},
      {"model shape/gradient contract", c5_model},
      {"end-to-end phantom run", c6_end_to_end},
      {"cascade vs single-step direction", c7_cascade_direction},
      {"export parity", c8_export},
      {"determinism", c9_determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second(ctx);
    } catch (const std::exception &e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.summary
              << std::endl;
  }
  return failed ? 1 : 0;
}
