#include "cordseg/patching.hpp"

#include <string>

namespace cordseg {

PatchGrid plan_grid(const Index3 &shape, const Index3 &patch_size, const Index3 &stride) {
  if (!(patch_size > 0).all() || !(stride > 0).all() || !(stride <= patch_size).all())
    throw Error(ErrorKind::InvalidStride, "need 0 < stride <= patch size on every axis");
  if (!(shape > 0).all())
    throw Error(ErrorKind::ShapeMismatch, "empty lattice");
  PatchGrid g;
  g.shape = shape;
  g.patch_size = patch_size;
  g.stride = stride;
  g.padded_shape = shape.max(patch_size);
  g.pad_low = (g.padded_shape - shape) / 2;

  std::array<std::vector<int>, 3> axis;
  for (int a = 0; a < 3; ++a) {
    const int last = g.padded_shape[a] - patch_size[a];
    for (int p = 0; p <= last; p += stride[a]) axis[a].push_back(p);
    if (axis[a].back() != last) axis[a].push_back(last);
  }
  for (int p0 : axis[0])
    for (int p1 : axis[1])
      for (int p2 : axis[2]) g.positions.emplace_back(p0, p1, p2);
  return g;
}

FeatureMap extract_patch(const FeatureMap &vol, const PatchGrid &grid, std::size_t i) {
  if (shape_of(vol).cwiseNotEqual(grid.shape).any())
    throw Error(ErrorKind::GridMismatch, "volume does not match the planned lattice");
  if (i >= grid.positions.size())
    throw Error(ErrorKind::GridMismatch, "patch index out of range");
  const Index3 ps = grid.patch_size;
  const Index3 lo = grid.positions[i] - grid.pad_low; // in unpadded coordinates
  const Eigen::Index nc = vol.dimension(3);
  FeatureMap patch(ps[0], ps[1], ps[2], nc);
  patch.setZero();
  const Index3 s = grid.shape;
  const Eigen::Index vplane = voxel_count(s), pplane = voxel_count(ps);
  const int x_begin = std::max(0, -lo[0]), x_end = std::min(ps[0], s[0] - lo[0]);
  if (x_end <= x_begin) return patch;
  for (Eigen::Index c = 0; c < nc; ++c)
    for (int z = 0; z < ps[2]; ++z) {
      const int iz = lo[2] + z;
      if (iz < 0 || iz >= s[2]) continue;
      for (int y = 0; y < ps[1]; ++y) {
        const int iy = lo[1] + y;
        if (iy < 0 || iy >= s[1]) continue;
        const float *src = vol.data() + c * vplane + (iy + Eigen::Index(s[1]) * iz) * s[0] + lo[0];
        float *dst = patch.data() + c * pplane + (y + Eigen::Index(ps[1]) * z) * ps[0];
        std::copy(src + x_begin, src + x_end, dst + x_begin);
      }
    }
  return patch;
}

std::vector<FeatureMap> extract(const FeatureMap &vol, const PatchGrid &grid) {
  std::vector<FeatureMap> out;
  out.reserve(grid.positions.size());
  for (std::size_t i = 0; i < grid.positions.size(); ++i) out.push_back(extract_patch(vol, grid, i));
  return out;
}

Stitcher::Stitcher(const PatchGrid &grid, Eigen::Index channels)
    : grid_(grid), channels_(channels),
      sum_(grid.padded_shape[0], grid.padded_shape[1], grid.padded_shape[2], channels),
      count_(grid.padded_shape[0], grid.padded_shape[1], grid.padded_shape[2]) {
  sum_.setZero();
  count_.setZero();
}

void Stitcher::add(std::size_t i, const FeatureMap &patch) {
  const Index3 ps = grid_.patch_size;
  if (i >= grid_.positions.size() || shape_of(patch).cwiseNotEqual(ps).any() || patch.dimension(3) != channels_)
    throw Error(ErrorKind::GridMismatch, "patch " + std::to_string(i) + " does not match the grid");
  const Index3 p = grid_.positions[i];
  const Eigen::array<Eigen::Index, 3> off3{p[0], p[1], p[2]}, ext3{ps[0], ps[1], ps[2]};
  const Eigen::array<Eigen::Index, 4> off4{p[0], p[1], p[2], 0}, ext4{ps[0], ps[1], ps[2], channels_};
  sum_.slice(off4, ext4) += patch.cast<double>();
  count_.slice(off3, ext3) += count_.slice(off3, ext3).constant(1.0);
}

FeatureMap Stitcher::result() const {
  const Index3 s = grid_.shape, lo = grid_.pad_low;
  FeatureMap out(s[0], s[1], s[2], channels_);
  for (Eigen::Index c = 0; c < channels_; ++c)
    for (int z = 0; z < s[2]; ++z)
      for (int y = 0; y < s[1]; ++y)
        for (int x = 0; x < s[0]; ++x) {
          const double n = count_(x + lo[0], y + lo[1], z + lo[2]);
          out(x, y, z, c) = n > 0.0 ? static_cast<float>(sum_(x + lo[0], y + lo[1], z + lo[2], c) / n) : 0.0f;
        }
  return out;
}

FeatureMap stitch(const std::vector<FeatureMap> &patches, const PatchGrid &grid) {
  if (patches.size() != grid.positions.size())
    throw Error(ErrorKind::GridMismatch, "expected " + std::to_string(grid.positions.size()) + " patches, got " +
                                             std::to_string(patches.size()));
  if (patches.empty())
    throw Error(ErrorKind::GridMismatch, "no patches");
  Stitcher st(grid, patches.front().dimension(3));
  for (std::size_t i = 0; i < patches.size(); ++i) st.add(i, patches[i]);
  return st.result();
}

} // namespace cordseg
