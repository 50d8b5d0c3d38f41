#pragma once

#include <filesystem>
#include <utility>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

enum class Interp { Linear, Nearest };

/// Output shape per axis is round(shape * spacing / target), at least 1.
/// Voxel centers map as x_in = (i + 0.5) * target / spacing - 0.5; linear
/// interpolation replicates the border.
template <typename Scalar>
Volume<Scalar> resample(const Volume<Scalar> &vol, const Spacing3 &target_spacing, Interp interp);

/// Same mapping as `resample` but with an explicit output lattice shape.
template <typename Scalar>
Volume<Scalar> resample_to_shape(const Volume<Scalar> &vol, const Spacing3 &target_spacing,
                                 const Index3 &target_shape, Interp interp);

Index3 resampled_shape(const Index3 &shape, const Spacing3 &spacing, const Spacing3 &target);

/// Voxels removed (+) or padded (-) at the low end of each axis. Output
/// voxel o sits over input voxel o + offset.
struct CropRecord {
  Index3 pre_shape{1, 1, 1};
  Index3 post_shape{1, 1, 1};
  Index3 offset{0, 0, 0};
};

CropRecord plan_center_crop_or_pad(const Index3 &pre_shape, const Index3 &target_shape);

template <typename Scalar>
std::pair<Volume<Scalar>, CropRecord> center_crop_or_pad(const Volume<Scalar> &vol,
                                                         const Index3 &target_shape, Scalar fill);

/// Maps a post-crop grid back onto the pre-crop lattice; voxels with no
/// counterpart get `fill`.
template <typename Scalar>
Grid<Scalar> undo_crop_or_pad(const Grid<Scalar> &grid, const CropRecord &rec, Scalar fill);

/// Copies grid values at lattice offset `offset` (may be negative) into a
/// grid of `out_shape`, filling uncovered voxels.
template <typename Scalar>
Grid<Scalar> shift_window(const Grid<Scalar> &grid, const Index3 &offset, const Index3 &out_shape,
                          Scalar fill);

/// (v - mean) / std over every voxel; constant input maps to zeros.
Volume3D znormalize(const Volume3D &vol);

/// Union of axial (AP-RL) disks of the given physical diameter centred on
/// centerline samples taken every half minimum spacing.
MaskVolume centerline_to_mask(const std::vector<Eigen::Vector3d> &centerline_voxels,
                              double diameter_mm, const Geometry &geometry);

/// JSON list of voxel-coordinate triples.
std::vector<Eigen::Vector3d> read_centerline(const std::filesystem::path &path);

} // namespace cordseg
