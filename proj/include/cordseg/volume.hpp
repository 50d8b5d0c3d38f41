#pragma once

// Geometric volume primitives. All grids are column-major Eigen tensors
// (axis 0 varies fastest), which is also the NIfTI on-disk voxel order.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>

#include <Eigen/Core>
#include <unsupported/Eigen/CXX11/Tensor>

#include "cordseg/error.hpp"

namespace cordseg {

template <typename Scalar> using Grid = Eigen::Tensor<Scalar, 3>;
using Mask = Grid<std::uint8_t>;
using SoftMask = Grid<float>;

using Index3 = Eigen::Array3i;
using Spacing3 = Eigen::Array3d;
using Point3 = Eigen::Array3d;

inline Index3 shape_of(const auto &grid) {
  return {static_cast<int>(grid.dimension(0)), static_cast<int>(grid.dimension(1)),
          static_cast<int>(grid.dimension(2))};
}

inline Eigen::Index voxel_count(const Index3 &shape) {
  return Eigen::Index(shape[0]) * shape[1] * shape[2];
}

/// Axis direction code: one letter per array axis naming the anatomical
/// direction in which the index increases (e.g. "RAS", "IPL"). The canonical
/// working order is superior->inferior, anterior->posterior, right->left.
class Orientation {
public:
  Orientation() = default;
  explicit Orientation(std::string_view code);

  static Orientation canonical() { return Orientation("IPL"); }

  char operator[](int axis) const { return code_[axis]; }
  std::string str() const { return {code_.begin(), code_.end()}; }
  bool operator==(const Orientation &) const = default;

  /// Unit world (RAS) direction of increasing index along `axis`.
  Eigen::Vector3d direction(int axis) const;

private:
  std::array<char, 3> code_{'I', 'P', 'L'};
};

/// Spacing, orientation and world position shared by volumes on one lattice.
struct Geometry {
  Index3 shape{1, 1, 1};
  Spacing3 spacing{1.0, 1.0, 1.0};
  Orientation orientation = Orientation::canonical();
  Point3 origin{0.0, 0.0, 0.0};

  /// World (RAS, mm) position of a continuous voxel coordinate.
  Eigen::Vector3d world(const Eigen::Vector3d &voxel) const;
  bool same_lattice(const Geometry &other, double spacing_tol = 1e-3) const;
};

template <typename Scalar> struct Volume {
  Grid<Scalar> data;
  Spacing3 spacing{1.0, 1.0, 1.0};
  Orientation orientation = Orientation::canonical();
  Point3 origin{0.0, 0.0, 0.0};

  Volume() = default;
  explicit Volume(const Geometry &g)
      : data(g.shape[0], g.shape[1], g.shape[2]), spacing(g.spacing),
        orientation(g.orientation), origin(g.origin) {
    data.setZero();
  }
  Volume(Grid<Scalar> grid, const Geometry &g)
      : data(std::move(grid)), spacing(g.spacing), orientation(g.orientation), origin(g.origin) {}

  Index3 shape() const { return shape_of(data); }
  Geometry geometry() const { return {shape(), spacing, orientation, origin}; }
};

using Volume3D = Volume<float>;
using MaskVolume = Volume<std::uint8_t>;

/// Inclusive voxel-index box inside a reference lattice shape.
struct BoundingBox3D {
  Index3 min_idx{0, 0, 0};
  Index3 max_idx{0, 0, 0};
  Index3 ref_shape{1, 1, 1};

  Index3 extent() const { return max_idx - min_idx + 1; }
  bool contains(const Index3 &p) const {
    return (p >= min_idx).all() && (p <= max_idx).all();
  }
  bool valid() const {
    return (min_idx >= 0).all() && (min_idx <= max_idx).all() && (max_idx < ref_shape).all();
  }
  bool operator==(const BoundingBox3D &o) const {
    return (min_idx == o.min_idx).all() && (max_idx == o.max_idx).all() &&
           (ref_shape == o.ref_shape).all();
  }
};

enum class LabelClass : int { Tumor = 0, Cavity = 1, Edema = 2, Whole = 3 };
inline constexpr int kNumClasses = 4;
inline constexpr std::array<std::string_view, kNumClasses> kClassNames{"tumor", "cavity", "edema",
                                                                       "whole"};

/// Per-class masks on one geometry. Values are soft in [0, 1] or binary.
struct LabelSet {
  std::array<SoftMask, kNumClasses> masks;
  Geometry geometry;

  LabelSet() = default;
  explicit LabelSet(const Geometry &g) : geometry(g) {
    for (auto &m : masks) {
      m.resize(g.shape[0], g.shape[1], g.shape[2]);
      m.setZero();
    }
  }

  SoftMask &operator[](LabelClass c) { return masks[static_cast<int>(c)]; }
  const SoftMask &operator[](LabelClass c) const { return masks[static_cast<int>(c)]; }

  /// whole := voxelwise max(tumor, cavity, edema)
  void recompute_whole();
  bool is_binary() const;
};

// ---------------------------------------------------------------------------
// Operations

/// Pure axis permutation/flip into `target` order; no interpolation.
template <typename Scalar>
Volume<Scalar> reorient(const Volume<Scalar> &vol, const Orientation &target);

template <typename Scalar> Volume<Scalar> reorient_canonical(const Volume<Scalar> &vol) {
  return reorient(vol, Orientation::canonical());
}

double voxel_volume_mm3(const Spacing3 &spacing_mm);

/// Tightest box around nonzero voxels. Throws EmptyMask.
template <typename Scalar> BoundingBox3D bbox_of_mask(const Grid<Scalar> &mask);

/// Extends each side by ceil(margin / spacing) voxels, clamped to ref_shape.
BoundingBox3D dilate_bbox(const BoundingBox3D &box, const Eigen::Array3d &margin_mm,
                          const Spacing3 &spacing_mm);

/// Copies the box region out of a grid.
template <typename Scalar> Grid<Scalar> crop_to_box(const Grid<Scalar> &g, const BoundingBox3D &b) {
  const Eigen::array<Eigen::Index, 3> offsets{b.min_idx[0], b.min_idx[1], b.min_idx[2]};
  const Index3 ext = b.extent();
  const Eigen::array<Eigen::Index, 3> extents{ext[0], ext[1], ext[2]};
  return g.slice(offsets, extents);
}

/// Geometry of a box region (origin moved to the box corner).
Geometry crop_geometry(const Geometry &g, const BoundingBox3D &b);

void require_positive_spacing(const Spacing3 &spacing);

} // namespace cordseg
