#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cordseg/augment.hpp"
#include "cordseg/nifti.hpp"
#include "cordseg/patching.hpp"
#include "cordseg/postprocess.hpp"
#include "cordseg/preprocess.hpp"
#include "cordseg/training.hpp"
#include "cordseg/unet3d.hpp"

namespace cordseg {

struct PreprocessConfig {
  Spacing3 target_spacing{1.0, 1.0, 2.0};
  Index3 crop_shape{512, 256, 32};

  void validate() const; // throws InvalidConfig
  bool operator==(const PreprocessConfig &o) const {
    return (target_spacing == o.target_spacing).all() && (crop_shape == o.crop_shape).all();
  }
};

struct PatchConfig {
  Index3 patch_size{128, 128, 32};
  Index3 stride{64, 64, 32};
  bool operator==(const PatchConfig &o) const {
    return (patch_size == o.patch_size).all() && (stride == o.stride).all();
  }
};

/// A subject on the working lattice: resampled, centre-cropped/padded and
/// z-normalized per contrast; labels follow with nearest interpolation.
struct WorkingSubject {
  std::string subject_id;
  RegionTag region_tag = RegionTag::Mixed;
  Volume3D t2w, t1w_gd;
  std::optional<LabelSet> gt;
  std::optional<MaskVolume> cord_mask;
  Geometry native;       // geometry of the (canonical) input
  Spacing3 resampled_spacing{1, 1, 1};
  CropRecord crop;       // resampled lattice -> working lattice
};

/// Throws GeometryMismatch when the contrasts disagree.
WorkingSubject preprocess_subject(const SubjectRecord &subject, const PreprocessConfig &cfg);

struct LocalizeOptions {
  double threshold = 0.5;
  Eigen::Array3d margin_mm{10.0, 10.0, 10.0};
};

struct Localization {
  Mask sc_mask; // largest 26-connected component of the binarized map
  BoundingBox3D bbox;
};

/// Binarize -> largest component -> tight box -> dilate. Throws
/// LocalizationEmpty when nothing reaches the threshold.
Localization localize_from_probability(const SoftMask &prob, const Spacing3 &spacing, const LocalizeOptions &opt = {});
Localization localize(const UNet3D &loc_model, const Volume3D &t2w_working, const LocalizeOptions &opt = {});

/// Sliding-window inference with overlap averaging; output is (x, y, z,
/// out_channels) over the input lattice.
FeatureMap segment(const UNet3D &seg_model, const FeatureMap &channels, const PatchConfig &patches);

/// Stacks same-shaped grids as channels.
FeatureMap stack_channels(const std::vector<const Grid<float> *> &grids);
FeatureMap label_channels(const LabelSet &labels);
LabelSet labels_from_channels(const FeatureMap &channels, const Geometry &geometry);

struct CascadeOptions {
  PreprocessConfig preprocess;
  PatchConfig patches;
  LocalizeOptions localize;
  PostprocessRules rules;
  /// Segment the full working grid when the localizer finds nothing.
  bool fallback_full_fov = false;
  /// No localization stage: segment the full working grid.
  bool single_step = false;
};

struct CascadeResult {
  LabelSet labels_native;   // binary, native lattice
  LabelSet labels_working;  // soft, working lattice (zero outside the box)
  LabelSet binary_working;  // after postprocessing
  Mask sc_mask;             // empty in single-step mode
  BoundingBox3D bbox;
  bool used_fallback = false;
  std::vector<std::pair<std::string, double>> timings; // stage -> seconds, in order
};

/// `loc_model` may be null in single-step mode.
CascadeResult run_pipeline(const UNet3D *loc_model, const UNet3D &seg_model, const SubjectRecord &subject,
                           const CascadeOptions &opt = {});
CascadeResult run_pipeline(const UNet3D *loc_model, const UNet3D &seg_model, const WorkingSubject &subject,
                           const CascadeOptions &opt = {});

/// Working-lattice binary labels -> native lattice (nearest).
LabelSet to_native(const LabelSet &binary_working, const WorkingSubject &subject);

/// Per class: every nonzero voxel lies inside the box (vacuously true when empty).
std::array<bool, kNumClasses> check_bbox_inclusion(const BoundingBox3D &bbox, const LabelSet &gt);

// ---------------------------------------------------------------------------
// Training data

/// Box used to crop training subjects: ground-truth cord mask, dilated.
BoundingBox3D training_crop_box(const WorkingSubject &s, const Eigen::Array3d &margin_mm);

struct LocalizerItem {
  Grid<float> t2w;
  Mask cord;
  Spacing3 spacing{1, 1, 1};
};

struct SegmenterItem {
  FeatureMap channels; // (x, y, z, 2) crop
  FeatureMap targets;  // (x, y, z, 4) crop
  Spacing3 spacing{1, 1, 1};
  PatchGrid grid;
};

LocalizerItem make_localizer_item(const WorkingSubject &s);
SegmenterItem make_segmenter_item(const WorkingSubject &s, const PatchConfig &patches,
                                  const Eigen::Array3d &margin_mm);

/// One sample per subject; augmentation applies when `augment` and the
/// draw seed is nonzero.
SampleSource localizer_samples(std::shared_ptr<const std::vector<LocalizerItem>> items, const AffineParams &aug,
                               bool augment);
/// One sample per patch of every subject.
SampleSource segmenter_samples(std::shared_ptr<const std::vector<SegmenterItem>> items, const AffineParams &aug,
                               bool augment);

} // namespace cordseg
