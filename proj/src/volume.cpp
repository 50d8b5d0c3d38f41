#include "cordseg/volume.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>

namespace cordseg {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
  case ErrorKind::UnknownOrientation: return "UnknownOrientation";
  case ErrorKind::NonPositiveSpacing: return "NonPositiveSpacing";
  case ErrorKind::EmptyMask: return "EmptyMask";
  case ErrorKind::FileNotFound: return "FileNotFound";
  case ErrorKind::MalformedHeader: return "MalformedHeader";
  case ErrorKind::UnsupportedDatatype: return "UnsupportedDatatype";
  case ErrorKind::IoFailure: return "IoFailure";
  case ErrorKind::GeometryMismatch: return "GeometryMismatch";
  case ErrorKind::MissingContrast: return "MissingContrast";
  case ErrorKind::EmptyCenterline: return "EmptyCenterline";
  case ErrorKind::InvalidConfig: return "InvalidConfig";
  case ErrorKind::ShapeMismatch: return "ShapeMismatch";
  case ErrorKind::ClassMismatch: return "ClassMismatch";
  case ErrorKind::InvalidStride: return "InvalidStride";
  case ErrorKind::GridMismatch: return "GridMismatch";
  case ErrorKind::InsufficientSubjects: return "InsufficientSubjects";
  case ErrorKind::DivergedLoss: return "DivergedLoss";
  case ErrorKind::LocalizationEmpty: return "LocalizationEmpty";
  case ErrorKind::UndefinedForEmptyGT: return "UndefinedForEmptyGT";
  case ErrorKind::EmptyRuns: return "EmptyRuns";
  case ErrorKind::SpecInvalid: return "SpecInvalid";
  case ErrorKind::ExportParityFailure: return "ExportParityFailure";
  case ErrorKind::CorruptCheckpoint: return "CorruptCheckpoint";
  }
  return "Unknown";
}

namespace {

// 0: R/L, 1: A/P, 2: S/I
int letter_pair(char c) {
  switch (c) {
  case 'R': case 'L': return 0;
  case 'A': case 'P': return 1;
  case 'S': case 'I': return 2;
  default: return -1;
  }
}

} // namespace

Orientation::Orientation(std::string_view code) {
  if (code.size() != 3)
    throw Error(ErrorKind::UnknownOrientation, "orientation code must have 3 letters: '" +
                                                   std::string(code) + "'");
  bool seen[3] = {false, false, false};
  for (int a = 0; a < 3; ++a) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(code[a])));
    const int pair = letter_pair(c);
    if (pair < 0 || seen[pair])
      throw Error(ErrorKind::UnknownOrientation, "bad orientation code '" + std::string(code) + "'");
    seen[pair] = true;
    code_[a] = c;
  }
}

Eigen::Vector3d Orientation::direction(int axis) const {
  switch (code_[axis]) {
  case 'R': return {1, 0, 0};
  case 'L': return {-1, 0, 0};
  case 'A': return {0, 1, 0};
  case 'P': return {0, -1, 0};
  case 'S': return {0, 0, 1};
  default: return {0, 0, -1};
  }
}

Eigen::Vector3d Geometry::world(const Eigen::Vector3d &voxel) const {
  Eigen::Vector3d p = origin.matrix();
  for (int a = 0; a < 3; ++a)
    p += orientation.direction(a) * spacing[a] * voxel[a];
  return p;
}

bool Geometry::same_lattice(const Geometry &other, double spacing_tol) const {
  return (shape == other.shape).all() && orientation == other.orientation &&
         ((spacing - other.spacing).abs() <= spacing_tol).all();
}

void LabelSet::recompute_whole() {
  auto &whole = masks[static_cast<int>(LabelClass::Whole)];
  whole = masks[0].cwiseMax(masks[1]).cwiseMax(masks[2]);
}

bool LabelSet::is_binary() const {
  for (const auto &m : masks)
    for (Eigen::Index i = 0; i < m.size(); ++i)
      if (m.data()[i] != 0.0f && m.data()[i] != 1.0f)
        return false;
  return true;
}

void require_positive_spacing(const Spacing3 &spacing) {
  if (!(spacing > 0.0).all() || !spacing.allFinite())
    throw Error(ErrorKind::NonPositiveSpacing, "spacing components must be positive");
}

template <typename Scalar>
Volume<Scalar> reorient(const Volume<Scalar> &vol, const Orientation &target) {
  Eigen::array<int, 3> perm{};
  Eigen::array<bool, 3> flip{};
  for (int t = 0; t < 3; ++t) {
    const int pair = letter_pair(target[t]);
    int src = -1;
    for (int a = 0; a < 3; ++a)
      if (letter_pair(vol.orientation[a]) == pair)
        src = a;
    if (src < 0)
      throw Error(ErrorKind::UnknownOrientation, "orientation " + vol.orientation.str());
    perm[t] = src;
    flip[t] = vol.orientation[src] != target[t];
  }

  Volume<Scalar> out;
  out.data = vol.data.shuffle(perm).reverse(flip);
  out.orientation = target;
  Eigen::Vector3d corner = Eigen::Vector3d::Zero();
  for (int t = 0; t < 3; ++t) {
    out.spacing[t] = vol.spacing[perm[t]];
    if (flip[t])
      corner[perm[t]] = static_cast<double>(vol.data.dimension(perm[t]) - 1);
  }
  out.origin = vol.geometry().world(corner).array();
  return out;
}

double voxel_volume_mm3(const Spacing3 &spacing_mm) {
  require_positive_spacing(spacing_mm);
  return spacing_mm.prod();
}

template <typename Scalar> BoundingBox3D bbox_of_mask(const Grid<Scalar> &mask) {
  const Index3 shape = shape_of(mask);
  Index3 lo = shape, hi(-1, -1, -1);
  for (int k = 0; k < shape[2]; ++k)
    for (int j = 0; j < shape[1]; ++j)
      for (int i = 0; i < shape[0]; ++i)
        if (mask(i, j, k) != Scalar(0)) {
          const Index3 p(i, j, k);
          lo = lo.min(p);
          hi = hi.max(p);
        }
  if (hi[0] < 0)
    throw Error(ErrorKind::EmptyMask, "mask has no nonzero voxel");
  return {lo, hi, shape};
}

BoundingBox3D dilate_bbox(const BoundingBox3D &box, const Eigen::Array3d &margin_mm,
                          const Spacing3 &spacing_mm) {
  BoundingBox3D out = box;
  for (int a = 0; a < 3; ++a) {
    const int pad = static_cast<int>(std::ceil(std::max(0.0, margin_mm[a]) / spacing_mm[a] - 1e-9));
    out.min_idx[a] = std::max(0, box.min_idx[a] - pad);
    out.max_idx[a] = std::min(box.ref_shape[a] - 1, box.max_idx[a] + pad);
  }
  return out;
}

Geometry crop_geometry(const Geometry &g, const BoundingBox3D &b) {
  Geometry out = g;
  out.shape = b.extent();
  out.origin = g.world(b.min_idx.cast<double>().matrix()).array();
  return out;
}

template Volume<float> reorient(const Volume<float> &, const Orientation &);
template Volume<std::uint8_t> reorient(const Volume<std::uint8_t> &, const Orientation &);
template BoundingBox3D bbox_of_mask(const Grid<float> &);
template BoundingBox3D bbox_of_mask(const Grid<std::uint8_t> &);

} // namespace cordseg
