#pragma once

#include <cstdint>
#include <random>
#include <utility>

#include "cordseg/preprocess.hpp"
#include "cordseg/tensor.hpp"
#include "cordseg/volume.hpp"

namespace cordseg {

/// Symmetric ranges: rotation in degrees about one randomly chosen axis,
/// isotropic scaling and translation (fraction of the axis length) in the
/// plane of axes 0 and 1 (superior-inferior, anterior-posterior).
struct AffineParams {
  double rotation_deg = 5.0;
  double scale_frac = 0.10;
  double translate_frac = 0.03;
  std::uint64_t rng_seed = 0;
};

struct AffineTransform {
  int rotation_axis = 0;
  double angle_rad = 0.0;
  double scale = 1.0;
  Eigen::Array2d translate_frac{0.0, 0.0};

  bool is_identity() const {
    return angle_rad == 0.0 && scale == 1.0 && (translate_frac == 0.0).all();
  }
};

AffineTransform sample_affine(const AffineParams &params, std::mt19937_64 &rng);

/// Resamples every channel about the grid center; voxels mapped outside the
/// input read as zero.
FeatureMap warp(const FeatureMap &channels, const Spacing3 &spacing, const AffineTransform &t,
                Interp interp);

/// Applies one sampled transform to image channels (linear) and targets
/// (nearest), both given as (x, y, z, channel) maps on the same lattice.
std::pair<FeatureMap, FeatureMap> random_affine(const FeatureMap &channels, const FeatureMap &targets,
                                                const Spacing3 &spacing, const AffineParams &params,
                                                std::mt19937_64 &rng);

std::pair<FeatureMap, LabelSet> random_affine(const FeatureMap &channels, const LabelSet &labels,
                                              const AffineParams &params, std::mt19937_64 &rng);

} // namespace cordseg
