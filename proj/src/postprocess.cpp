#include "cordseg/postprocess.hpp"

#include <algorithm>
#include <vector>

namespace cordseg {

namespace {

struct Offset {
  int dx, dy, dz;
};

std::vector<Offset> neighbours(Connectivity conn) {
  std::vector<Offset> out;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (n == 0 || (conn == Connectivity::Face && n > 1)) continue;
        out.push_back({dx, dy, dz});
      }
  return out;
}

Mask to_mask(const SoftMask &m) {
  return m.unaryExpr([](float v) { return static_cast<std::uint8_t>(v != 0.0f); });
}

SoftMask to_soft(const Mask &m) { return m.cast<float>(); }

} // namespace

Components label_components(const Mask &mask, Connectivity conn) {
  const Index3 s = shape_of(mask);
  Components out;
  out.labels = Grid<std::int32_t>(s[0], s[1], s[2]);
  out.labels.setZero();
  out.sizes.assign(1, 0);
  const auto nb = neighbours(conn);
  std::vector<Index3> stack;
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[0]; ++x) {
        if (!mask(x, y, z) || out.labels(x, y, z)) continue;
        const auto id = static_cast<std::int32_t>(out.sizes.size());
        Eigen::Index size = 0;
        out.labels(x, y, z) = id;
        stack.assign(1, Index3(x, y, z));
        while (!stack.empty()) {
          const Index3 p = stack.back();
          stack.pop_back();
          ++size;
          for (const Offset &o : nb) {
            const int qx = p[0] + o.dx, qy = p[1] + o.dy, qz = p[2] + o.dz;
            if (qx < 0 || qy < 0 || qz < 0 || qx >= s[0] || qy >= s[1] || qz >= s[2]) continue;
            if (!mask(qx, qy, qz) || out.labels(qx, qy, qz)) continue;
            out.labels(qx, qy, qz) = id;
            stack.emplace_back(qx, qy, qz);
          }
        }
        out.sizes.push_back(size);
      }
  return out;
}

Mask largest_component(const Mask &mask, Connectivity conn) {
  const Components cc = label_components(mask, conn);
  Mask out(mask.dimensions());
  out.setZero();
  if (cc.count() == 0) return out;
  const auto best = static_cast<std::int32_t>(std::max_element(cc.sizes.begin() + 1, cc.sizes.end()) - cc.sizes.begin());
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = cc.labels.data()[i] == best;
  return out;
}

void PostprocessRules::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw Error(ErrorKind::InvalidConfig, "postprocess threshold must lie in (0, 1)");
  for (double v : min_volume_mm3)
    if (!(v >= 0.0)) throw Error(ErrorKind::InvalidConfig, "minimum volumes must be >= 0");
}

Mask binarize(const SoftMask &prob, double threshold) {
  return prob.unaryExpr([threshold](float v) { return static_cast<std::uint8_t>(double(v) >= threshold); });
}

Mask fill_holes(const Mask &mask) {
  const Index3 s = shape_of(mask);
  // flood the background from every border voxel
  Mask outside(mask.dimensions());
  outside.setZero();
  std::vector<Index3> stack;
  auto seed = [&](int x, int y, int z) {
    if (!mask(x, y, z) && !outside(x, y, z)) {
      outside(x, y, z) = 1;
      stack.emplace_back(x, y, z);
    }
  };
  for (int z = 0; z < s[2]; ++z)
    for (int y = 0; y < s[1]; ++y)
      for (int x = 0; x < s[0]; ++x)
        if (x == 0 || y == 0 || z == 0 || x == s[0] - 1 || y == s[1] - 1 || z == s[2] - 1) seed(x, y, z);
  const auto nb = neighbours(Connectivity::Face);
  while (!stack.empty()) {
    const Index3 p = stack.back();
    stack.pop_back();
    for (const Offset &o : nb) {
      const int qx = p[0] + o.dx, qy = p[1] + o.dy, qz = p[2] + o.dz;
      if (qx < 0 || qy < 0 || qz < 0 || qx >= s[0] || qy >= s[1] || qz >= s[2]) continue;
      seed(qx, qy, qz);
    }
  }
  return outside.unaryExpr([](std::uint8_t v) { return static_cast<std::uint8_t>(!v); });
}

Mask remove_small(const Mask &mask, double min_mm3, const Spacing3 &spacing) {
  if (min_mm3 <= 0.0) return mask;
  const double vox = voxel_volume_mm3(spacing);
  const Components cc = label_components(mask, Connectivity::Full);
  std::vector<std::uint8_t> keep(cc.sizes.size(), 0);
  for (std::size_t i = 1; i < cc.sizes.size(); ++i) keep[i] = static_cast<double>(cc.sizes[i]) * vox >= min_mm3;
  Mask out(mask.dimensions());
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = keep[cc.labels.data()[i]];
  return out;
}

LabelSet apply_rules(const LabelSet &labels, const PostprocessRules &rules) {
  rules.validate();
  LabelSet out(labels.geometry);
  for (int c = 0; c < kNumClasses; ++c) {
    Mask m = binarize(labels.masks[c], rules.threshold);
    if (rules.fill_holes) m = fill_holes(m);
    m = remove_small(m, rules.min_volume_mm3[c], labels.geometry.spacing);
    out.masks[c] = to_soft(m);
  }
  return out;
}

MaskVolume label_map(const LabelSet &binary) {
  MaskVolume out(binary.geometry);
  constexpr std::array<LabelClass, 3> order{LabelClass::Edema, LabelClass::Cavity, LabelClass::Tumor};
  for (LabelClass c : order) {
    const Mask m = to_mask(binary[c]);
    const auto value = static_cast<std::uint8_t>(static_cast<int>(c) + 1);
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (m.data()[i]) out.data.data()[i] = value;
  }
  return out;
}

} // namespace cordseg
