#include "cordseg/nifti.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <Eigen/Geometry>
#include <zlib.h>

#include <nlohmann/json.hpp>

namespace cordseg {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max, cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax, glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

enum NiftiType : std::int16_t {
  kUint8 = 2, kInt16 = 4, kInt32 = 8, kFloat32 = 16, kFloat64 = 64,
  kInt8 = 256, kUint16 = 512, kUint32 = 768, kInt64 = 1024, kUint64 = 1280,
};

template <typename T> void swap_bytes(T &v) {
  auto *p = reinterpret_cast<unsigned char *>(&v);
  std::reverse(p, p + sizeof(T));
}

void swap_header(Nifti1Header &h) {
  swap_bytes(h.sizeof_hdr);
  for (auto &d : h.dim) swap_bytes(d);
  swap_bytes(h.datatype);
  swap_bytes(h.bitpix);
  for (auto &p : h.pixdim) swap_bytes(p);
  swap_bytes(h.vox_offset);
  swap_bytes(h.scl_slope);
  swap_bytes(h.scl_inter);
  swap_bytes(h.qform_code);
  swap_bytes(h.sform_code);
  swap_bytes(h.quatern_b); swap_bytes(h.quatern_c); swap_bytes(h.quatern_d);
  swap_bytes(h.qoffset_x); swap_bytes(h.qoffset_y); swap_bytes(h.qoffset_z);
  for (int i = 0; i < 4; ++i) {
    swap_bytes(h.srow_x[i]); swap_bytes(h.srow_y[i]); swap_bytes(h.srow_z[i]);
  }
}

struct GzFile {
  gzFile f = nullptr;
  GzFile(const fs::path &p, const char *mode) : f(gzopen(p.c_str(), mode)) {}
  ~GzFile() { if (f) gzclose(f); }
  GzFile(const GzFile &) = delete;
  GzFile &operator=(const GzFile &) = delete;
};

bool is_gz(const fs::path &p) { return p.extension() == ".gz"; }

struct ParsedHeader {
  Nifti1Header h{};
  bool swapped = false;
};

ParsedHeader read_header(GzFile &file, const fs::path &path) {
  ParsedHeader out;
  const int n = gzread(file.f, &out.h, sizeof(Nifti1Header));
  if (n != static_cast<int>(sizeof(Nifti1Header)))
    throw Error(ErrorKind::MalformedHeader, "truncated header in " + path.string());
  if (out.h.sizeof_hdr != 348) {
    Nifti1Header probe = out.h;
    swap_bytes(probe.sizeof_hdr);
    if (probe.sizeof_hdr != 348)
      throw Error(ErrorKind::MalformedHeader, "sizeof_hdr != 348 in " + path.string());
    swap_header(out.h);
    out.swapped = true;
  }
  if (std::memcmp(out.h.magic, "n+1", 4) != 0 && std::memcmp(out.h.magic, "ni1", 4) != 0)
    throw Error(ErrorKind::MalformedHeader, "bad magic in " + path.string());
  const int ndim = out.h.dim[0];
  if (ndim < 1 || ndim > 7)
    throw Error(ErrorKind::MalformedHeader, "bad dim[0] in " + path.string());
  for (int d = 4; d <= ndim; ++d)
    if (out.h.dim[d] > 1)
      throw Error(ErrorKind::UnsupportedDatatype, "only 3D volumes are supported: " + path.string());
  for (int d = 1; d <= 3; ++d)
    if (d <= ndim && out.h.dim[d] < 1)
      throw Error(ErrorKind::MalformedHeader, "non-positive dimension in " + path.string());
  return out;
}

Index3 header_dims(const Nifti1Header &h) {
  Index3 dims(1, 1, 1);
  for (int d = 1; d <= std::min<int>(3, h.dim[0]); ++d)
    dims[d - 1] = h.dim[d];
  return dims;
}

/// 3x4 voxel-to-world (RAS) affine from sform, qform or pixdim.
Eigen::Matrix<double, 3, 4> header_affine(const Nifti1Header &h) {
  Eigen::Matrix<double, 3, 4> A = Eigen::Matrix<double, 3, 4>::Zero();
  if (h.sform_code > 0) {
    for (int c = 0; c < 4; ++c) {
      A(0, c) = h.srow_x[c];
      A(1, c) = h.srow_y[c];
      A(2, c) = h.srow_z[c];
    }
    return A;
  }
  const Eigen::Vector3d pix(std::abs(h.pixdim[1]) > 0 ? std::abs(h.pixdim[1]) : 1.0,
                            std::abs(h.pixdim[2]) > 0 ? std::abs(h.pixdim[2]) : 1.0,
                            std::abs(h.pixdim[3]) > 0 ? std::abs(h.pixdim[3]) : 1.0);
  if (h.qform_code > 0) {
    const double b = h.quatern_b, c = h.quatern_c, d = h.quatern_d;
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const Eigen::Quaterniond q(a, b, c, d);
    Eigen::Matrix3d R = q.toRotationMatrix();
    const double qfac = h.pixdim[0] < 0 ? -1.0 : 1.0;
    R.col(2) *= qfac;
    A.leftCols<3>() = R * pix.asDiagonal();
    A.col(3) << h.qoffset_x, h.qoffset_y, h.qoffset_z;
    return A;
  }
  A.leftCols<3>() = pix.asDiagonal();
  return A;
}

Geometry geometry_from_affine(const Eigen::Matrix<double, 3, 4> &A, const Index3 &dims,
                              const fs::path &path) {
  Geometry g;
  g.shape = dims;
  std::string code(3, '?');
  bool used[3] = {false, false, false};
  for (int a = 0; a < 3; ++a) {
    const Eigen::Vector3d col = A.col(a);
    const double norm = col.norm();
    if (!(norm > 0.0))
      throw Error(ErrorKind::MalformedHeader, "degenerate affine in " + path.string());
    g.spacing[a] = norm;
    Eigen::Index row = 0;
    col.cwiseAbs().maxCoeff(&row);
    if (used[row])
      throw Error(ErrorKind::UnknownOrientation, "non-orthogonal axes in " + path.string());
    used[row] = true;
    static constexpr char pos[3] = {'R', 'A', 'S'};
    static constexpr char neg[3] = {'L', 'P', 'I'};
    code[a] = col[row] >= 0 ? pos[row] : neg[row];
  }
  g.orientation = Orientation(code);
  g.origin = A.col(3).array();
  return g;
}

template <typename T>
void convert_block(const unsigned char *raw, Eigen::Index n, bool swapped, float slope, float inter,
                   float *dst) {
  for (Eigen::Index i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, raw + i * sizeof(T), sizeof(T));
    if (swapped) swap_bytes(v);
    dst[i] = static_cast<float>(static_cast<double>(v) * slope + inter);
  }
}

int datatype_size(std::int16_t dt) {
  switch (dt) {
  case kUint8: case kInt8: return 1;
  case kInt16: case kUint16: return 2;
  case kInt32: case kUint32: case kFloat32: return 4;
  case kFloat64: case kInt64: case kUint64: return 8;
  default: return 0;
  }
}

Volume3D read_native(const fs::path &path) {
  if (!fs::exists(path))
    throw Error(ErrorKind::FileNotFound, path.string());
  GzFile file(path, "rb");
  if (!file.f)
    throw Error(ErrorKind::IoFailure, "cannot open " + path.string());
  const ParsedHeader ph = read_header(file, path);
  const Nifti1Header &h = ph.h;
  const int bytes = datatype_size(h.datatype);
  if (bytes == 0)
    throw Error(ErrorKind::UnsupportedDatatype,
                "datatype " + std::to_string(h.datatype) + " in " + path.string());

  const Index3 dims = header_dims(h);
  Volume3D vol(geometry_from_affine(header_affine(h), dims, path));

  const long offset = std::max<long>(348, static_cast<long>(h.vox_offset));
  if (gzseek(file.f, offset, SEEK_SET) != offset)
    throw Error(ErrorKind::MalformedHeader, "truncated file " + path.string());

  const Eigen::Index n = voxel_count(dims);
  std::vector<unsigned char> raw(static_cast<std::size_t>(n) * bytes);
  // gzread takes an unsigned count; read in chunks for very large volumes.
  std::size_t done = 0;
  while (done < raw.size()) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - done, 1u << 30));
    const int got = gzread(file.f, raw.data() + done, chunk);
    if (got <= 0)
      throw Error(ErrorKind::MalformedHeader, "truncated voxel data in " + path.string());
    done += static_cast<std::size_t>(got);
  }

  float slope = h.scl_slope, inter = h.scl_inter;
  if (slope == 0.0f || !std::isfinite(slope)) {
    slope = 1.0f;
    inter = 0.0f;
  }
  if (!std::isfinite(inter)) inter = 0.0f;
  float *dst = vol.data.data();
  switch (h.datatype) {
  case kUint8: convert_block<std::uint8_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kInt8: convert_block<std::int8_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kInt16: convert_block<std::int16_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kUint16: convert_block<std::uint16_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kInt32: convert_block<std::int32_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kUint32: convert_block<std::uint32_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kFloat32: convert_block<float>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kFloat64: convert_block<double>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kInt64: convert_block<std::int64_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  case kUint64: convert_block<std::uint64_t>(raw.data(), n, ph.swapped, slope, inter, dst); break;
  default: break;
  }
  return vol;
}

Nifti1Header make_header(const Geometry &g, std::int16_t datatype, std::int16_t bitpix) {
  require_positive_spacing(g.spacing);
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.dim[0] = 3;
  for (int a = 0; a < 3; ++a) {
    h.dim[a + 1] = static_cast<std::int16_t>(g.shape[a]);
    h.pixdim[a + 1] = static_cast<float>(g.spacing[a]);
  }
  for (int d = 4; d < 8; ++d) h.dim[d] = 1;
  h.pixdim[0] = 1.0f;
  h.datatype = datatype;
  h.bitpix = bitpix;
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2; // mm
  h.sform_code = 1;
  float *rows[3] = {h.srow_x, h.srow_y, h.srow_z};
  for (int a = 0; a < 3; ++a) {
    const Eigen::Vector3d col = g.orientation.direction(a) * g.spacing[a];
    for (int r = 0; r < 3; ++r) rows[r][a] = static_cast<float>(col[r]);
  }
  for (int r = 0; r < 3; ++r) rows[r][3] = static_cast<float>(g.origin[r]);
  std::memcpy(h.magic, "n+1", 4);
  return h;
}

void write_raw(const fs::path &path, const Nifti1Header &h, const void *data, std::size_t bytes) {
  if (path.has_parent_path() && !fs::exists(path.parent_path()))
    throw Error(ErrorKind::IoFailure, "directory does not exist: " + path.parent_path().string());
  const char extension[4] = {0, 0, 0, 0};
  if (is_gz(path)) {
    GzFile file(path, "wb6");
    if (!file.f)
      throw Error(ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
    bool ok = gzwrite(file.f, &h, sizeof(h)) == static_cast<int>(sizeof(h));
    ok = ok && gzwrite(file.f, extension, 4) == 4;
    std::size_t done = 0;
    const auto *p = static_cast<const unsigned char *>(data);
    while (ok && done < bytes) {
      const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(bytes - done, 1u << 30));
      ok = gzwrite(file.f, p + done, chunk) == static_cast<int>(chunk);
      done += chunk;
    }
    if (!ok)
      throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw Error(ErrorKind::IoFailure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char *>(&h), sizeof(h));
  out.write(extension, 4);
  out.write(static_cast<const char *>(data), static_cast<std::streamsize>(bytes));
  if (!out)
    throw Error(ErrorKind::IoFailure, "write failed: " + path.string());
}

} // namespace

Volume3D read_volume(const fs::path &path) { return reorient_canonical(read_native(path)); }

MaskVolume read_mask(const fs::path &path) {
  const Volume3D v = read_volume(path);
  MaskVolume m;
  m.data = (v.data != 0.0f).cast<std::uint8_t>();
  m.spacing = v.spacing;
  m.orientation = v.orientation;
  m.origin = v.origin;
  return m;
}

NiftiInfo read_nifti_info(const fs::path &path) {
  if (!fs::exists(path))
    throw Error(ErrorKind::FileNotFound, path.string());
  GzFile file(path, "rb");
  const ParsedHeader ph = read_header(file, path);
  NiftiInfo info;
  info.dims = header_dims(ph.h);
  info.pixdim = {ph.h.pixdim[1], ph.h.pixdim[2], ph.h.pixdim[3]};
  info.datatype = ph.h.datatype;
  info.orientation = geometry_from_affine(header_affine(ph.h), info.dims, path).orientation;
  return info;
}

void write_volume(const Volume3D &vol, const fs::path &path) {
  const Nifti1Header h = make_header(vol.geometry(), kFloat32, 32);
  write_raw(path, h, vol.data.data(), static_cast<std::size_t>(vol.data.size()) * sizeof(float));
}

void write_mask(const MaskVolume &mask, const fs::path &path) {
  const Nifti1Header h = make_header(mask.geometry(), kUint8, 8);
  write_raw(path, h, mask.data.data(), static_cast<std::size_t>(mask.data.size()));
}

// ---------------------------------------------------------------------------
// Manifest and subjects

std::string to_string(RegionTag tag) {
  switch (tag) {
  case RegionTag::Cervical: return "cervical";
  case RegionTag::Thoracic: return "thoracic";
  case RegionTag::Lumbar: return "lumbar";
  case RegionTag::Mixed: return "mixed";
  }
  return "mixed";
}

RegionTag region_tag_from_string(const std::string &s) {
  if (s == "cervical") return RegionTag::Cervical;
  if (s == "thoracic") return RegionTag::Thoracic;
  if (s == "lumbar") return RegionTag::Lumbar;
  if (s == "mixed") return RegionTag::Mixed;
  throw Error(ErrorKind::InvalidConfig, "unknown region_tag '" + s + "'");
}

std::vector<ManifestEntry> read_manifest(const fs::path &manifest_json) {
  std::ifstream in(manifest_json);
  if (!in)
    throw Error(ErrorKind::FileNotFound, manifest_json.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::InvalidConfig, "manifest parse error: " + std::string(e.what()));
  }
  if (!j.is_array())
    throw Error(ErrorKind::InvalidConfig, "manifest must be a JSON array");
  const fs::path base = manifest_json.parent_path();
  auto resolve = [&](const std::string &p) { return fs::path(p).is_absolute() ? fs::path(p) : base / p; };

  std::vector<ManifestEntry> out;
  for (const auto &item : j) {
    try {
      ManifestEntry e;
      e.subject_id = item.at("subject_id").get<std::string>();
      e.t2w = resolve(item.at("t2w").get<std::string>());
      e.t1w_gd = resolve(item.at("t1w_gd").get<std::string>());
      for (auto [key, slot] : {std::pair{"tumor", &e.tumor}, std::pair{"cavity", &e.cavity},
                               std::pair{"edema", &e.edema}, std::pair{"cord_mask", &e.cord_mask}})
        if (item.contains(key) && !item.at(key).is_null())
          *slot = resolve(item.at(key).get<std::string>());
      e.region_tag = region_tag_from_string(item.value("region_tag", std::string("mixed")));
      out.push_back(std::move(e));
    } catch (const nlohmann::json::exception &ex) {
      throw Error(ErrorKind::InvalidConfig, "manifest entry: " + std::string(ex.what()));
    }
  }
  return out;
}

void write_manifest(const std::vector<ManifestEntry> &entries, const fs::path &manifest_json) {
  const fs::path base = manifest_json.parent_path();
  auto rel = [&](const fs::path &p) { return fs::relative(p, base.empty() ? "." : base).generic_string(); };
  nlohmann::json j = nlohmann::json::array();
  for (const auto &e : entries) {
    nlohmann::json item;
    item["subject_id"] = e.subject_id;
    item["t2w"] = rel(e.t2w);
    item["t1w_gd"] = rel(e.t1w_gd);
    if (e.tumor) item["tumor"] = rel(*e.tumor);
    if (e.cavity) item["cavity"] = rel(*e.cavity);
    if (e.edema) item["edema"] = rel(*e.edema);
    if (e.cord_mask) item["cord_mask"] = rel(*e.cord_mask);
    item["region_tag"] = to_string(e.region_tag);
    j.push_back(std::move(item));
  }
  std::ofstream out(manifest_json);
  if (!out)
    throw Error(ErrorKind::IoFailure, "cannot write " + manifest_json.string());
  out << j.dump(2) << '\n';
}

void validate_subject(const SubjectRecord &s) {
  const Geometry ref = s.t2w.geometry();
  if (!ref.same_lattice(s.t1w_gd.geometry()))
    throw Error(ErrorKind::GeometryMismatch,
                s.subject_id + ": T2w and T1w-Gd lattices differ (pre-registered inputs required)");
  if (s.gt && !ref.same_lattice(s.gt->geometry))
    throw Error(ErrorKind::GeometryMismatch, s.subject_id + ": label geometry differs from T2w");
  if (s.cord_mask && !ref.same_lattice(s.cord_mask->geometry()))
    throw Error(ErrorKind::GeometryMismatch, s.subject_id + ": cord mask geometry differs from T2w");
}

SubjectRecord load_subject(const ManifestEntry &entry) {
  SubjectRecord s;
  s.subject_id = entry.subject_id;
  s.region_tag = entry.region_tag;
  if (entry.t2w.empty() || !fs::exists(entry.t2w))
    throw Error(ErrorKind::MissingContrast, entry.subject_id + ": T2w file missing");
  if (entry.t1w_gd.empty() || !fs::exists(entry.t1w_gd))
    throw Error(ErrorKind::MissingContrast, entry.subject_id + ": T1w-Gd file missing");
  s.t2w = read_volume(entry.t2w);
  s.t1w_gd = read_volume(entry.t1w_gd);

  const bool any_label = entry.tumor || entry.cavity || entry.edema;
  if (any_label) {
    LabelSet gt(s.t2w.geometry());
    const std::optional<fs::path> files[3] = {entry.tumor, entry.cavity, entry.edema};
    for (int c = 0; c < 3; ++c) {
      if (!files[c]) continue;
      const MaskVolume m = read_mask(*files[c]);
      if (!s.t2w.geometry().same_lattice(m.geometry()))
        throw Error(ErrorKind::GeometryMismatch,
                    entry.subject_id + ": " + std::string(kClassNames[c]) + " geometry differs");
      gt.masks[c] = m.data.cast<float>();
    }
    gt.recompute_whole();
    s.gt = std::move(gt);
  }
  if (entry.cord_mask)
    s.cord_mask = read_mask(*entry.cord_mask);
  validate_subject(s);
  return s;
}

} // namespace cordseg
