#include "cordseg/augment.hpp"

#include <cmath>
#include <numbers>

#include <Eigen/Geometry>

namespace cordseg {

namespace {

Eigen::Index plane_of(const FeatureMap &f) { return f.dimension(0) * f.dimension(1) * f.dimension(2); }

} // namespace

AffineTransform sample_affine(const AffineParams &params, std::mt19937_64 &rng) {
  std::uniform_int_distribution<int> axis(0, 2);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  AffineTransform t;
  t.rotation_axis = axis(rng);
  t.angle_rad = params.rotation_deg * unit(rng) * std::numbers::pi / 180.0;
  t.scale = 1.0 + params.scale_frac * unit(rng);
  t.translate_frac[0] = params.translate_frac * unit(rng);
  t.translate_frac[1] = params.translate_frac * unit(rng);
  return t;
}

FeatureMap warp(const FeatureMap &channels, const Spacing3 &spacing, const AffineTransform &t,
                Interp interp) {
  if (t.is_identity())
    return channels;
  const Eigen::Index n0 = channels.dimension(0), n1 = channels.dimension(1), n2 = channels.dimension(2);
  const Eigen::Index nc = channels.dimension(3);
  const Eigen::Index plane = plane_of(channels);

  // forward map in mm about the center: x' = R S x + t; we need its inverse
  Eigen::Matrix3d rot = Eigen::AngleAxisd(t.angle_rad, Eigen::Vector3d::Unit(t.rotation_axis)).toRotationMatrix();
  const Eigen::Vector3d scale(t.scale, t.scale, 1.0);
  const Eigen::Vector3d shift_mm(t.translate_frac[0] * n0 * spacing[0], t.translate_frac[1] * n1 * spacing[1], 0.0);
  const Eigen::Matrix3d fwd = rot * scale.asDiagonal();
  const Eigen::Vector3d sp = spacing.matrix();
  // voxel-space inverse: in = M (o - c) + c - M_mm^{-1} shift
  const Eigen::Matrix3d inv_mm = fwd.inverse();
  const Eigen::Matrix3d m = sp.cwiseInverse().asDiagonal() * inv_mm * sp.asDiagonal();
  const Eigen::Vector3d c((n0 - 1) / 2.0, (n1 - 1) / 2.0, (n2 - 1) / 2.0);
  const Eigen::Vector3d off = c - m * c - sp.cwiseInverse().cwiseProduct(inv_mm * shift_mm);

  FeatureMap out(channels.dimensions());
  out.setZero();
  const float *src = channels.data();
  float *dst = out.data();
  for (Eigen::Index z = 0; z < n2; ++z)
    for (Eigen::Index y = 0; y < n1; ++y) {
      const Eigen::Vector3d row = m.col(1) * double(y) + m.col(2) * double(z) + off;
      for (Eigen::Index x = 0; x < n0; ++x) {
        const Eigen::Vector3d p = row + m.col(0) * double(x);
        const Eigen::Index o = x + n0 * (y + n1 * z);
        if (interp == Interp::Nearest) {
          const long i0 = std::lround(p[0]), i1 = std::lround(p[1]), i2 = std::lround(p[2]);
          if (i0 < 0 || i1 < 0 || i2 < 0 || i0 >= n0 || i1 >= n1 || i2 >= n2) continue;
          const Eigen::Index s = i0 + n0 * (i1 + n1 * i2);
          for (Eigen::Index ch = 0; ch < nc; ++ch) dst[o + ch * plane] = src[s + ch * plane];
          continue;
        }
        const double f0 = std::floor(p[0]), f1 = std::floor(p[1]), f2 = std::floor(p[2]);
        const long b0 = static_cast<long>(f0), b1 = static_cast<long>(f1), b2 = static_cast<long>(f2);
        if (b0 < -1 || b1 < -1 || b2 < -1 || b0 >= n0 || b1 >= n1 || b2 >= n2) continue;
        const double w0 = p[0] - f0, w1 = p[1] - f1, w2 = p[2] - f2;
        for (int corner = 0; corner < 8; ++corner) {
          const long i0 = b0 + (corner & 1), i1 = b1 + ((corner >> 1) & 1), i2 = b2 + (corner >> 2);
          if (i0 < 0 || i1 < 0 || i2 < 0 || i0 >= n0 || i1 >= n1 || i2 >= n2) continue;
          const double w = ((corner & 1) ? w0 : 1.0 - w0) * (((corner >> 1) & 1) ? w1 : 1.0 - w1) *
                           ((corner >> 2) ? w2 : 1.0 - w2);
          if (w == 0.0) continue;
          const Eigen::Index s = i0 + n0 * (i1 + n1 * i2);
          for (Eigen::Index ch = 0; ch < nc; ++ch)
            dst[o + ch * plane] += static_cast<float>(w * src[s + ch * plane]);
        }
      }
    }
  return out;
}

std::pair<FeatureMap, FeatureMap> random_affine(const FeatureMap &channels, const FeatureMap &targets,
                                                const Spacing3 &spacing, const AffineParams &params,
                                                std::mt19937_64 &rng) {
  const AffineTransform t = sample_affine(params, rng);
  return {warp(channels, spacing, t, Interp::Linear), warp(targets, spacing, t, Interp::Nearest)};
}

std::pair<FeatureMap, LabelSet> random_affine(const FeatureMap &channels, const LabelSet &labels,
                                              const AffineParams &params, std::mt19937_64 &rng) {
  const Index3 s = labels.geometry.shape;
  FeatureMap targets(s[0], s[1], s[2], kNumClasses);
  const Eigen::Index plane = voxel_count(s);
  for (int c = 0; c < kNumClasses; ++c)
    std::copy_n(labels.masks[c].data(), plane, targets.data() + c * plane);
  auto [img, tgt] = random_affine(channels, targets, labels.geometry.spacing, params, rng);
  LabelSet out(labels.geometry);
  for (int c = 0; c < kNumClasses; ++c) std::copy_n(tgt.data() + c * plane, plane, out.masks[c].data());
  return {std::move(img), std::move(out)};
}

} // namespace cordseg
