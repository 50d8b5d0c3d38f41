#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

namespace fs = std::filesystem;

/// Reads a NIfTI-1 file (.nii or .nii.gz) into canonical orientation.
Volume3D read_volume(const fs::path &path);

/// Reads a label file; any nonzero voxel becomes 1.
MaskVolume read_mask(const fs::path &path);

/// Writes float32 intensities with the volume's own orientation in the sform.
void write_volume(const Volume3D &vol, const fs::path &path);

/// Writes an unsigned 8-bit label volume.
void write_mask(const MaskVolume &mask, const fs::path &path);

/// Raw header values, mostly for tests and diagnostics.
struct NiftiInfo {
  Index3 dims{0, 0, 0};
  Eigen::Array3d pixdim{0, 0, 0};
  int datatype = 0;
  Orientation orientation;
};
NiftiInfo read_nifti_info(const fs::path &path);

enum class RegionTag { Cervical, Thoracic, Lumbar, Mixed };
std::string to_string(RegionTag tag);
RegionTag region_tag_from_string(const std::string &s);

/// One manifest row. Paths are absolute after `read_manifest`.
struct ManifestEntry {
  std::string subject_id;
  fs::path t2w;
  fs::path t1w_gd;
  std::optional<fs::path> tumor;
  std::optional<fs::path> cavity;
  std::optional<fs::path> edema;
  std::optional<fs::path> cord_mask;
  RegionTag region_tag = RegionTag::Mixed;
};

std::vector<ManifestEntry> read_manifest(const fs::path &manifest_json);

/// Writes entries with paths relative to the manifest's directory.
void write_manifest(const std::vector<ManifestEntry> &entries, const fs::path &manifest_json);

struct SubjectRecord {
  std::string subject_id;
  Volume3D t2w;
  Volume3D t1w_gd;
  std::optional<LabelSet> gt;
  std::optional<MaskVolume> cord_mask;
  RegionTag region_tag = RegionTag::Mixed;
};

/// Verifies that the contrasts share a lattice (spacing within 1e-3 mm) and
/// that optional labels share the T2w geometry. Throws GeometryMismatch.
void validate_subject(const SubjectRecord &subject);

/// Loads and validates one subject; absent class files become empty masks
/// and `whole` is recomputed as the union.
SubjectRecord load_subject(const ManifestEntry &entry);

} // namespace cordseg
