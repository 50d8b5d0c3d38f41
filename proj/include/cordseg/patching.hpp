#pragma once

#include <vector>

#include "cordseg/tensor.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

/// Sliding-window layout over a (possibly zero-padded) lattice.
struct PatchGrid {
  Index3 shape{1, 1, 1}; // lattice before padding
  Index3 patch_size{1, 1, 1};
  Index3 stride{1, 1, 1};
  Index3 padded_shape{1, 1, 1};
  Index3 pad_low{0, 0, 0};
  std::vector<Index3> positions; // low corners in the padded lattice
};

/// Axes shorter than the patch are padded symmetrically (odd voxel high).
/// Positions per axis are 0, s, 2s, ... plus a flush final position.
/// Throws InvalidStride.
PatchGrid plan_grid(const Index3 &shape, const Index3 &patch_size, const Index3 &stride);

/// Patch `i` of a multi-channel map; padded voxels are zero.
FeatureMap extract_patch(const FeatureMap &vol, const PatchGrid &grid, std::size_t i);
std::vector<FeatureMap> extract(const FeatureMap &vol, const PatchGrid &grid);

/// Overlap-averaging accumulator; patches may be added in any order.
class Stitcher {
public:
  Stitcher(const PatchGrid &grid, Eigen::Index channels);
  void add(std::size_t i, const FeatureMap &patch); // throws GridMismatch
  /// Per-voxel mean over covering patches, cropped to the unpadded shape.
  FeatureMap result() const;

private:
  PatchGrid grid_;
  Eigen::Index channels_;
  Eigen::Tensor<double, 4> sum_;
  Eigen::Tensor<double, 3> count_;
};

/// Throws GridMismatch when the patch count or shapes differ from the grid.
FeatureMap stitch(const std::vector<FeatureMap> &patches, const PatchGrid &grid);

} // namespace cordseg
