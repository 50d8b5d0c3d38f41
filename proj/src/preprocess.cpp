#include "cordseg/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

namespace cordseg {

namespace {

struct Tap {
  Eigen::Index i0, i1;
  double w; // weight of i1
};

std::vector<Tap> plan_taps(Eigen::Index n_in, Eigen::Index n_out, double factor, Interp interp) {
  std::vector<Tap> taps(static_cast<std::size_t>(n_out));
  for (Eigen::Index o = 0; o < n_out; ++o) {
    const double x = (static_cast<double>(o) + 0.5) * factor - 0.5;
    if (interp == Interp::Nearest) {
      const auto i = std::clamp<Eigen::Index>(static_cast<Eigen::Index>(std::floor(x + 0.5)), 0, n_in - 1);
      taps[o] = {i, i, 0.0};
    } else {
      const double xc = std::clamp(x, 0.0, static_cast<double>(n_in - 1));
      const auto i0 = static_cast<Eigen::Index>(std::floor(xc));
      const auto i1 = std::min(i0 + 1, n_in - 1);
      taps[o] = {i0, i1, xc - static_cast<double>(i0)};
    }
  }
  return taps;
}

template <typename Scalar> Scalar from_real(double v) {
  if constexpr (std::is_integral_v<Scalar>)
    return static_cast<Scalar>(std::lround(v));
  else
    return static_cast<Scalar>(v);
}

template <typename Scalar>
Grid<Scalar> resample_axis(const Grid<Scalar> &in, int axis, Eigen::Index n_out, double factor,
                           Interp interp) {
  Eigen::array<Eigen::Index, 3> dims = in.dimensions();
  const Eigen::Index n_in = dims[axis];
  if (n_in == n_out && factor == 1.0)
    return in;
  dims[axis] = n_out;
  Grid<Scalar> out(dims);
  const auto taps = plan_taps(n_in, n_out, factor, interp);

  Eigen::Index inner = 1, outer = 1;
  for (int a = 0; a < axis; ++a) inner *= in.dimension(a);
  for (int a = axis + 1; a < 3; ++a) outer *= in.dimension(a);
  const Scalar *src = in.data();
  Scalar *dst = out.data();
  for (Eigen::Index b = 0; b < outer; ++b) {
    const Scalar *sb = src + b * n_in * inner;
    Scalar *db = dst + b * n_out * inner;
    for (Eigen::Index o = 0; o < n_out; ++o) {
      const Tap t = taps[o];
      const Scalar *r0 = sb + t.i0 * inner;
      const Scalar *r1 = sb + t.i1 * inner;
      Scalar *d = db + o * inner;
      if (t.w == 0.0) {
        std::copy(r0, r0 + inner, d);
      } else {
        for (Eigen::Index i = 0; i < inner; ++i)
          d[i] = from_real<Scalar>((1.0 - t.w) * static_cast<double>(r0[i]) +
                                   t.w * static_cast<double>(r1[i]));
      }
    }
  }
  return out;
}

} // namespace

Index3 resampled_shape(const Index3 &shape, const Spacing3 &spacing, const Spacing3 &target) {
  Index3 out;
  for (int a = 0; a < 3; ++a)
    out[a] = std::max(1, static_cast<int>(std::lround(shape[a] * spacing[a] / target[a])));
  return out;
}

template <typename Scalar>
Volume<Scalar> resample_to_shape(const Volume<Scalar> &vol, const Spacing3 &target_spacing,
                                 const Index3 &target_shape, Interp interp) {
  require_positive_spacing(vol.spacing);
  require_positive_spacing(target_spacing);
  if (!(target_shape >= 1).all())
    throw Error(ErrorKind::ShapeMismatch, "target shape must be positive");

  Volume<Scalar> out;
  out.data = vol.data;
  Eigen::Vector3d first = Eigen::Vector3d::Zero();
  for (int a = 0; a < 3; ++a) {
    const double factor = target_spacing[a] / vol.spacing[a];
    out.data = resample_axis(out.data, a, target_shape[a], factor, interp);
    first[a] = 0.5 * factor - 0.5;
  }
  out.spacing = target_spacing;
  out.orientation = vol.orientation;
  out.origin = vol.geometry().world(first).array();
  return out;
}

template <typename Scalar>
Volume<Scalar> resample(const Volume<Scalar> &vol, const Spacing3 &target_spacing, Interp interp) {
  require_positive_spacing(vol.spacing);
  require_positive_spacing(target_spacing);
  return resample_to_shape(vol, target_spacing, resampled_shape(vol.shape(), vol.spacing, target_spacing),
                           interp);
}

CropRecord plan_center_crop_or_pad(const Index3 &pre_shape, const Index3 &target_shape) {
  CropRecord rec{pre_shape, target_shape, Index3::Zero()};
  for (int a = 0; a < 3; ++a) {
    const int diff = pre_shape[a] - target_shape[a];
    // floor division keeps the odd voxel on the high side in both directions
    rec.offset[a] = diff >= 0 ? diff / 2 : -((-diff) / 2);
  }
  return rec;
}

template <typename Scalar>
Grid<Scalar> shift_window(const Grid<Scalar> &grid, const Index3 &offset, const Index3 &out_shape,
                          Scalar fill) {
  Grid<Scalar> out(out_shape[0], out_shape[1], out_shape[2]);
  out.setConstant(fill);
  const Index3 in_shape = shape_of(grid);
  const Index3 lo = (-offset).max(0);
  const Index3 hi = (in_shape - offset).min(out_shape); // exclusive
  if ((hi <= lo).any())
    return out;
  const Index3 ext = hi - lo;
  const Eigen::array<Eigen::Index, 3> src_off{lo[0] + offset[0], lo[1] + offset[1], lo[2] + offset[2]};
  const Eigen::array<Eigen::Index, 3> dst_off{lo[0], lo[1], lo[2]};
  const Eigen::array<Eigen::Index, 3> extents{ext[0], ext[1], ext[2]};
  out.slice(dst_off, extents) = grid.slice(src_off, extents);
  return out;
}

template <typename Scalar>
std::pair<Volume<Scalar>, CropRecord> center_crop_or_pad(const Volume<Scalar> &vol,
                                                         const Index3 &target_shape, Scalar fill) {
  if (!(target_shape >= 1).all())
    throw Error(ErrorKind::ShapeMismatch, "target shape must be positive");
  const CropRecord rec = plan_center_crop_or_pad(vol.shape(), target_shape);
  Volume<Scalar> out;
  out.data = shift_window(vol.data, rec.offset, target_shape, fill);
  out.spacing = vol.spacing;
  out.orientation = vol.orientation;
  out.origin = vol.geometry().world(rec.offset.cast<double>().matrix()).array();
  return {std::move(out), rec};
}

template <typename Scalar>
Grid<Scalar> undo_crop_or_pad(const Grid<Scalar> &grid, const CropRecord &rec, Scalar fill) {
  if (!(shape_of(grid) == rec.post_shape).all())
    throw Error(ErrorKind::ShapeMismatch, "grid does not match crop record");
  return shift_window(grid, Index3(-rec.offset), rec.pre_shape, fill);
}

Volume3D znormalize(const Volume3D &vol) {
  const Eigen::Index n = vol.data.size();
  const float *p = vol.data.data();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) sum += p[i];
  const double mean = n > 0 ? sum / static_cast<double>(n) : 0.0;
  double ss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = p[i] - mean;
    ss += d * d;
  }
  const double sd = n > 0 ? std::sqrt(ss / static_cast<double>(n)) : 0.0;

  Volume3D out = vol;
  float *q = out.data.data();
  if (!(sd > 0.0) || !std::isfinite(sd)) {
    out.data.setZero();
    return out;
  }
  for (Eigen::Index i = 0; i < n; ++i)
    q[i] = static_cast<float>((p[i] - mean) / sd);
  return out;
}

MaskVolume centerline_to_mask(const std::vector<Eigen::Vector3d> &centerline_voxels,
                              double diameter_mm, const Geometry &geometry) {
  if (centerline_voxels.empty())
    throw Error(ErrorKind::EmptyCenterline, "centerline has no points");
  if (!(diameter_mm > 0.0))
    throw Error(ErrorKind::InvalidConfig, "diameter must be positive");
  require_positive_spacing(geometry.spacing);
  const Index3 shape = geometry.shape;
  const Spacing3 sp = geometry.spacing;
  auto inside = [&](const Eigen::Vector3d &p) {
    for (int a = 0; a < 3; ++a)
      if (p[a] < -0.5 || p[a] >= shape[a] - 0.5) return false;
    return true;
  };
  if (std::none_of(centerline_voxels.begin(), centerline_voxels.end(), inside))
    throw Error(ErrorKind::EmptyCenterline, "no centerline point inside the grid");

  MaskVolume mask(geometry);
  const double radius = 0.5 * diameter_mm;
  const double step_mm = 0.5 * sp.minCoeff();
  const int r1 = static_cast<int>(std::ceil(radius / sp[1])) + 1;
  const int r2 = static_cast<int>(std::ceil(radius / sp[2])) + 1;

  auto stamp = [&](const Eigen::Vector3d &p) {
    const long i0 = std::lround(p[0]);
    if (i0 < 0 || i0 >= shape[0]) return;
    const long c1 = std::lround(p[1]), c2 = std::lround(p[2]);
    for (long k = c2 - r2; k <= c2 + r2; ++k) {
      if (k < 0 || k >= shape[2]) continue;
      const double dk = (static_cast<double>(k) - p[2]) * sp[2];
      for (long j = c1 - r1; j <= c1 + r1; ++j) {
        if (j < 0 || j >= shape[1]) continue;
        const double dj = (static_cast<double>(j) - p[1]) * sp[1];
        if (dj * dj + dk * dk <= radius * radius)
          mask.data(i0, j, k) = 1;
      }
    }
    // the voxel holding the sample always belongs to the mask
    if (c1 >= 0 && c1 < shape[1] && c2 >= 0 && c2 < shape[2])
      mask.data(i0, c1, c2) = 1;
  };

  stamp(centerline_voxels.front());
  for (std::size_t s = 1; s < centerline_voxels.size(); ++s) {
    const Eigen::Vector3d a = centerline_voxels[s - 1], b = centerline_voxels[s];
    const double len_mm = ((b - a).array() * sp).matrix().norm();
    const int steps = std::max(1, static_cast<int>(std::ceil(len_mm / step_mm)));
    for (int t = 1; t <= steps; ++t)
      stamp(a + (b - a) * (static_cast<double>(t) / steps));
  }
  return mask;
}

std::vector<Eigen::Vector3d> read_centerline(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(ErrorKind::FileNotFound, path.string());
  nlohmann::json j;
  try {
    in >> j;
    std::vector<Eigen::Vector3d> pts;
    for (const auto &p : j)
      pts.emplace_back(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>());
    return pts;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::InvalidConfig, "centerline: " + std::string(e.what()));
  }
}

#define CORDSEG_INSTANTIATE(T)                                                                     \
  template Volume<T> resample(const Volume<T> &, const Spacing3 &, Interp);                        \
  template Volume<T> resample_to_shape(const Volume<T> &, const Spacing3 &, const Index3 &, Interp); \
  template std::pair<Volume<T>, CropRecord> center_crop_or_pad(const Volume<T> &, const Index3 &, T); \
  template Grid<T> undo_crop_or_pad(const Grid<T> &, const CropRecord &, T);                       \
  template Grid<T> shift_window(const Grid<T> &, const Index3 &, const Index3 &, T);

CORDSEG_INSTANTIATE(float)
CORDSEG_INSTANTIATE(std::uint8_t)
#undef CORDSEG_INSTANTIATE

} // namespace cordseg
