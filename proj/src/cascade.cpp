#include "cordseg/cascade.hpp"

#include <chrono>

#include "cordseg/volume.hpp"

namespace cordseg {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

Volume3D prepare_contrast(const Volume3D &v, const PreprocessConfig &cfg) {
  const Volume3D r = resample(v, cfg.target_spacing, Interp::Linear);
  return znormalize(center_crop_or_pad(r, cfg.crop_shape, 0.f).first);
}

template <typename Scalar> Volume<Scalar> prepare_label(const Volume<Scalar> &v, const PreprocessConfig &cfg) {
  return center_crop_or_pad(resample(v, cfg.target_spacing, Interp::Nearest), cfg.crop_shape, Scalar(0)).first;
}

FeatureMap crop_channels(const FeatureMap &f, const BoundingBox3D &b) {
  const Index3 e = b.extent();
  const Eigen::array<Eigen::Index, 4> off{b.min_idx[0], b.min_idx[1], b.min_idx[2], 0};
  const Eigen::array<Eigen::Index, 4> ext{e[0], e[1], e[2], f.dimension(3)};
  return f.slice(off, ext);
}

} // namespace

void PreprocessConfig::validate() const {
  if ((target_spacing <= 0.0).any()) throw Error(ErrorKind::InvalidConfig, "target spacing must be positive");
  if ((crop_shape < 1).any()) throw Error(ErrorKind::InvalidConfig, "crop shape must be positive");
}

WorkingSubject preprocess_subject(const SubjectRecord &subject, const PreprocessConfig &cfg) {
  cfg.validate();
  validate_subject(subject);
  WorkingSubject w;
  w.subject_id = subject.subject_id;
  w.region_tag = subject.region_tag;
  w.native = subject.t2w.geometry();
  w.resampled_spacing = cfg.target_spacing;
  w.crop = plan_center_crop_or_pad(resampled_shape(w.native.shape, w.native.spacing, cfg.target_spacing),
                                   cfg.crop_shape);
  w.t2w = prepare_contrast(subject.t2w, cfg);
  w.t1w_gd = prepare_contrast(subject.t1w_gd, cfg);
  if (subject.gt) {
    LabelSet g(w.t2w.geometry());
    for (int c = 0; c < kNumClasses - 1; ++c)
      g.masks[c] = prepare_label(Volume3D(subject.gt->masks[c], subject.gt->geometry), cfg).data;
    g.recompute_whole();
    w.gt = std::move(g);
  }
  if (subject.cord_mask) w.cord_mask = prepare_label(*subject.cord_mask, cfg);
  return w;
}

Localization localize_from_probability(const SoftMask &prob, const Spacing3 &spacing, const LocalizeOptions &opt) {
  const Mask bin = binarize(prob, opt.threshold);
  bool any = false;
  for (Eigen::Index i = 0; i < bin.size() && !any; ++i) any = bin.data()[i] != 0;
  if (!any) throw Error(ErrorKind::LocalizationEmpty, "no voxel reaches the localization threshold");
  Localization out;
  out.sc_mask = largest_component(bin, Connectivity::Full);
  out.bbox = dilate_bbox(bbox_of_mask(out.sc_mask), opt.margin_mm, spacing);
  return out;
}

Localization localize(const UNet3D &loc_model, const Volume3D &t2w_working, const LocalizeOptions &opt) {
  const FeatureMap in = stack_channels({&t2w_working.data});
  const FeatureMap prob = loc_model.forward(in);
  const SoftMask p = prob.chip(0, 3);
  return localize_from_probability(p, t2w_working.spacing, opt);
}

FeatureMap segment(const UNet3D &seg_model, const FeatureMap &channels, const PatchConfig &patches) {
  const PatchGrid grid = plan_grid({int(channels.dimension(0)), int(channels.dimension(1)), int(channels.dimension(2))},
                                   patches.patch_size, patches.stride);
  Stitcher st(grid, seg_model.config().out_channels);
  for (std::size_t i = 0; i < grid.positions.size(); ++i) st.add(i, seg_model.forward(extract_patch(channels, grid, i)));
  return st.result();
}

FeatureMap stack_channels(const std::vector<const Grid<float> *> &grids) {
  const Grid<float> &g0 = *grids.front();
  FeatureMap f(g0.dimension(0), g0.dimension(1), g0.dimension(2), Eigen::Index(grids.size()));
  const Eigen::Index n = g0.size();
  for (std::size_t c = 0; c < grids.size(); ++c) {
    if (grids[c]->dimensions() != g0.dimensions()) throw Error(ErrorKind::ShapeMismatch, "channel shapes differ");
    std::copy_n(grids[c]->data(), n, f.data() + Eigen::Index(c) * n);
  }
  return f;
}

FeatureMap label_channels(const LabelSet &labels) {
  std::vector<const Grid<float> *> g;
  for (const auto &m : labels.masks) g.push_back(&m);
  return stack_channels(g);
}

LabelSet labels_from_channels(const FeatureMap &channels, const Geometry &geometry) {
  if (channels.dimension(3) != kNumClasses) throw Error(ErrorKind::ClassMismatch, "expected four class channels");
  LabelSet l(geometry);
  const Eigen::Index n = voxel_count(geometry.shape);
  if (channels.size() != n * kNumClasses) throw Error(ErrorKind::ShapeMismatch, "channel lattice differs from geometry");
  for (int c = 0; c < kNumClasses; ++c) std::copy_n(channels.data() + c * n, n, l.masks[c].data());
  return l;
}

LabelSet to_native(const LabelSet &binary_working, const WorkingSubject &s) {
  Geometry resampled;
  resampled.shape = s.crop.pre_shape;
  resampled.spacing = s.resampled_spacing;
  resampled.orientation = s.native.orientation;
  LabelSet out(s.native);
  for (int c = 0; c < kNumClasses; ++c) {
    Volume3D v(undo_crop_or_pad(binary_working.masks[c], s.crop, 0.f), resampled);
    out.masks[c] = resample_to_shape(v, s.native.spacing, s.native.shape, Interp::Nearest).data;
  }
  return out;
}

CascadeResult run_pipeline(const UNet3D *loc_model, const UNet3D &seg_model, const SubjectRecord &subject,
                           const CascadeOptions &opt) {
  const auto t0 = Clock::now();
  const WorkingSubject w = preprocess_subject(subject, opt.preprocess);
  const double prep = seconds_since(t0);
  CascadeResult r = run_pipeline(loc_model, seg_model, w, opt);
  r.timings.insert(r.timings.begin(), {"preprocess", prep});
  return r;
}

CascadeResult run_pipeline(const UNet3D *loc_model, const UNet3D &seg_model, const WorkingSubject &w,
                           const CascadeOptions &opt) {
  if (w.t2w.data.dimensions() != w.t1w_gd.data.dimensions())
    throw Error(ErrorKind::GeometryMismatch, "contrasts differ on the working lattice");
  CascadeResult r;
  const Index3 shape = w.t2w.shape();
  const BoundingBox3D full{{0, 0, 0}, shape - 1, shape};

  auto t = Clock::now();
  if (opt.single_step) {
    r.bbox = full;
  } else {
    if (!loc_model) throw Error(ErrorKind::InvalidConfig, "cascade mode needs a localizer model");
    try {
      Localization loc = localize(*loc_model, w.t2w, opt.localize);
      r.sc_mask = std::move(loc.sc_mask);
      r.bbox = loc.bbox;
    } catch (const Error &e) {
      if (e.kind() != ErrorKind::LocalizationEmpty || !opt.fallback_full_fov) throw;
      r.bbox = full;
      r.used_fallback = true;
    }
    r.timings.emplace_back("localize", seconds_since(t));
  }

  t = Clock::now();
  const FeatureMap channels = stack_channels({&w.t2w.data, &w.t1w_gd.data});
  const FeatureMap crop_prob = segment(seg_model, crop_channels(channels, r.bbox), opt.patches);
  FeatureMap full_prob(shape[0], shape[1], shape[2], crop_prob.dimension(3));
  full_prob.setZero();
  {
    const Index3 e = r.bbox.extent();
    const Eigen::array<Eigen::Index, 4> off{r.bbox.min_idx[0], r.bbox.min_idx[1], r.bbox.min_idx[2], 0};
    const Eigen::array<Eigen::Index, 4> ext{e[0], e[1], e[2], crop_prob.dimension(3)};
    full_prob.slice(off, ext) = crop_prob;
  }
  r.labels_working = labels_from_channels(full_prob, w.t2w.geometry());
  r.timings.emplace_back("segment", seconds_since(t));

  t = Clock::now();
  r.binary_working = apply_rules(r.labels_working, opt.rules);
  r.timings.emplace_back("postprocess", seconds_since(t));

  t = Clock::now();
  r.labels_native = to_native(r.binary_working, w);
  r.timings.emplace_back("backproject", seconds_since(t));
  return r;
}

std::array<bool, kNumClasses> check_bbox_inclusion(const BoundingBox3D &bbox, const LabelSet &gt) {
  std::array<bool, kNumClasses> out;
  out.fill(true);
  const Index3 s = gt.geometry.shape;
  for (int c = 0; c < kNumClasses; ++c) {
    const SoftMask &m = gt.masks[c];
    for (int z = 0; z < s[2] && out[c]; ++z)
      for (int y = 0; y < s[1] && out[c]; ++y)
        for (int x = 0; x < s[0]; ++x)
          if (m(x, y, z) != 0.f && !bbox.contains({x, y, z})) {
            out[c] = false;
            break;
          }
  }
  return out;
}

BoundingBox3D training_crop_box(const WorkingSubject &s, const Eigen::Array3d &margin_mm) {
  if (!s.cord_mask) throw Error(ErrorKind::EmptyMask, s.subject_id + ": no cord mask to crop with");
  return dilate_bbox(bbox_of_mask(s.cord_mask->data), margin_mm, s.t2w.spacing);
}

LocalizerItem make_localizer_item(const WorkingSubject &s) {
  if (!s.cord_mask) throw Error(ErrorKind::EmptyMask, s.subject_id + ": no cord mask");
  return {s.t2w.data, s.cord_mask->data, s.t2w.spacing};
}

SegmenterItem make_segmenter_item(const WorkingSubject &s, const PatchConfig &patches, const Eigen::Array3d &margin_mm) {
  if (!s.gt) throw Error(ErrorKind::EmptyMask, s.subject_id + ": no ground truth");
  const BoundingBox3D box = training_crop_box(s, margin_mm);
  SegmenterItem item;
  item.channels = crop_channels(stack_channels({&s.t2w.data, &s.t1w_gd.data}), box);
  item.targets = crop_channels(label_channels(*s.gt), box);
  item.spacing = s.t2w.spacing;
  item.grid = plan_grid(box.extent(), patches.patch_size, patches.stride);
  return item;
}

SampleSource localizer_samples(std::shared_ptr<const std::vector<LocalizerItem>> items, const AffineParams &aug,
                               bool augment) {
  const std::size_t n = items->size();
  return {n, [items, aug, augment](std::size_t i, std::uint64_t seed) {
            const LocalizerItem &it = (*items)[i];
            Sample s;
            s.input = stack_channels({&it.t2w});
            const Grid<float> cord = it.cord.cast<float>();
            s.target = stack_channels({&cord});
            if (augment && seed != 0) {
              std::mt19937_64 rng(seed);
              std::tie(s.input, s.target) = random_affine(s.input, s.target, it.spacing, aug, rng);
            }
            return s;
          }};
}

SampleSource segmenter_samples(std::shared_ptr<const std::vector<SegmenterItem>> items, const AffineParams &aug,
                               bool augment) {
  std::vector<std::pair<std::size_t, std::size_t>> index;
  for (std::size_t k = 0; k < items->size(); ++k)
    for (std::size_t p = 0; p < (*items)[k].grid.positions.size(); ++p) index.emplace_back(k, p);
  const std::size_t n = index.size();
  return {n, [items, aug, augment, index = std::move(index)](std::size_t i, std::uint64_t seed) {
            const auto [k, p] = index[i];
            const SegmenterItem &it = (*items)[k];
            if (augment && seed != 0) {
              std::mt19937_64 rng(seed);
              const auto [ch, tg] = random_affine(it.channels, it.targets, it.spacing, aug, rng);
              return Sample{extract_patch(ch, it.grid, p), extract_patch(tg, it.grid, p)};
            }
            return Sample{extract_patch(it.channels, it.grid, p), extract_patch(it.targets, it.grid, p)};
          }};
}

} // namespace cordseg
