#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "cordseg/nifti.hpp"

namespace cordseg {

struct LesionSpec {
  double probability = 1.0;
  int count_min = 1;
  int count_max = 1;
  double radius_min_mm = 3.0; // cross-sectional (AP/RL) radius
  double radius_max_mm = 5.0;
  double elongation_min = 1.0; // SI radius / cross-sectional radius
  double elongation_max = 1.0;
  bool operator==(const LesionSpec &) const = default;
};

/// Intensities of one contrast before noise.
struct ContrastRule {
  double background = 0.2;
  double csf = 0.9;
  double cord = 0.5;
  double tumor_enhancing = 0.65;
  double tumor_plain = 0.65;
  double cavity = 1.0;
  double edema = 0.75;
  bool operator==(const ContrastRule &) const = default;
};

struct PhantomSpec {
  Index3 shape{320, 192, 24}; // SI, AP, RL
  Spacing3 native_spacing{0.6, 0.6, 3.68};
  double cord_radius_mm = 6.5;
  double csf_rim_mm = 3.0;
  double curvature_amp_mm = 4.0;
  double curvature_period_mm = 160.0;
  double cord_mask_diameter_mm = 30.0;
  LesionSpec tumor{1.0, 1, 1, 3.0, 5.5, 1.5, 3.0};
  LesionSpec cavity{0.67, 1, 1, 3.0, 4.5, 3.0, 5.0};
  LesionSpec edema{0.51, 1, 1, 4.5, 6.0, 1.2, 1.8};
  double enhancing_fraction = 0.7; // tumors shown bright on T1w-Gd
  double tumor_t2_min = 0.6, tumor_t2_max = 0.7;
  ContrastRule t2w{0.2, 0.9, 0.5, 0.65, 0.65, 1.0, 0.75};
  ContrastRule t1w{0.2, 0.1, 0.4, 0.9, 0.55, 0.15, 0.3};
  double noise_sigma = 0.03;
  /// cervical, thoracic, lumbar, mixed
  std::array<double, 4> region_probs{0.4, 0.35, 0.1, 0.15};
  std::uint64_t seed = 0;

  /// The default 60-subject profile.
  static PhantomSpec desk();
  static constexpr int kDeskSubjects = 60;

  void validate() const; // throws SpecInvalid
  bool operator==(const PhantomSpec &) const;
};

void to_json(nlohmann::json &j, const PhantomSpec &s);
void from_json(const nlohmann::json &j, PhantomSpec &s);

/// Cord centerline in voxel coordinates, one point per SI row.
std::vector<Eigen::Vector3d> phantom_centerline(const PhantomSpec &spec, double phase);

SubjectRecord generate_subject(const PhantomSpec &spec, std::mt19937_64 &rng, std::string subject_id = "phantom");

/// Subject `i` is drawn from its own stream seeded by (seed, i). Writes
/// NIfTI files per subject (absent classes have no file), `manifest.json`
/// and `phantom_spec.json`. Returns the manifest entries.
std::vector<ManifestEntry> generate_dataset(int n, const PhantomSpec &spec, std::uint64_t seed,
                                            const std::filesystem::path &out_dir);

} // namespace cordseg
