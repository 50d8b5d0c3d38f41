#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

enum class Connectivity { Face = 6, Full = 26 };

/// Component labels (0 = background, components numbered from 1 in scan
/// order) and voxel counts indexed by label (sizes[0] unused).
struct Components {
  Grid<std::int32_t> labels;
  std::vector<Eigen::Index> sizes;
  int count() const { return static_cast<int>(sizes.size()) - 1; }
};

Components label_components(const Mask &mask, Connectivity conn);

/// Keeps only the largest component (first in scan order on ties).
Mask largest_component(const Mask &mask, Connectivity conn = Connectivity::Full);

struct PostprocessRules {
  double threshold = 0.5;
  /// Indexed by LabelClass: tumor, cavity, edema, whole.
  std::array<double, kNumClasses> min_volume_mm3{200.0, 500.0, 500.0, 200.0};
  bool fill_holes = true;

  void validate() const; // throws InvalidConfig
  bool operator==(const PostprocessRules &) const = default;
};

/// 1 where prob >= threshold.
Mask binarize(const SoftMask &prob, double threshold);

/// Sets background voxels not 6-connected to the volume border to 1.
Mask fill_holes(const Mask &mask);

/// Drops 26-connected components whose physical volume is < min_mm3.
Mask remove_small(const Mask &mask, double min_mm3, const Spacing3 &spacing);

/// Per class: binarize -> fill holes -> remove small. Output values are 0/1.
LabelSet apply_rules(const LabelSet &labels, const PostprocessRules &rules);

/// Single label map for viewers: 1 tumor, 2 cavity, 3 edema (that priority).
MaskVolume label_map(const LabelSet &binary);

} // namespace cordseg
