#include "cordseg/phantom.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "cordseg/preprocess.hpp"
#include "cordseg/training.hpp"

namespace cordseg {

namespace {

struct Ellipsoid {
  Eigen::Vector3d center_mm; // voxel-centre coordinates scaled by spacing
  double r_cross = 0.0, r_si = 0.0;

  bool contains(const Eigen::Vector3d &p_mm) const {
    const Eigen::Vector3d d = p_mm - center_mm;
    return (d[0] * d[0]) / (r_si * r_si) + (d[1] * d[1] + d[2] * d[2]) / (r_cross * r_cross) <= 1.0;
  }
};

void lesion_json(nlohmann::json &j, const LesionSpec &l) {
  j = {{"probability", l.probability},   {"count_min", l.count_min},       {"count_max", l.count_max},
       {"radius_min_mm", l.radius_min_mm}, {"radius_max_mm", l.radius_max_mm}, {"elongation_min", l.elongation_min},
       {"elongation_max", l.elongation_max}};
}

LesionSpec lesion_from(const nlohmann::json &j, LesionSpec l) {
  l.probability = j.value("probability", l.probability);
  l.count_min = j.value("count_min", l.count_min);
  l.count_max = j.value("count_max", l.count_max);
  l.radius_min_mm = j.value("radius_min_mm", l.radius_min_mm);
  l.radius_max_mm = j.value("radius_max_mm", l.radius_max_mm);
  l.elongation_min = j.value("elongation_min", l.elongation_min);
  l.elongation_max = j.value("elongation_max", l.elongation_max);
  return l;
}

nlohmann::json rule_json(const ContrastRule &r) {
  return {{"background", r.background}, {"csf", r.csf},       {"cord", r.cord},
          {"tumor_enhancing", r.tumor_enhancing}, {"tumor_plain", r.tumor_plain},
          {"cavity", r.cavity},         {"edema", r.edema}};
}

ContrastRule rule_from(const nlohmann::json &j, ContrastRule r) {
  r.background = j.value("background", r.background);
  r.csf = j.value("csf", r.csf);
  r.cord = j.value("cord", r.cord);
  r.tumor_enhancing = j.value("tumor_enhancing", r.tumor_enhancing);
  r.tumor_plain = j.value("tumor_plain", r.tumor_plain);
  r.cavity = j.value("cavity", r.cavity);
  r.edema = j.value("edema", r.edema);
  return r;
}

void check_lesion(const LesionSpec &l, const char *name) {
  const std::string n(name);
  if (!(l.probability >= 0.0 && l.probability <= 1.0)) throw Error(ErrorKind::SpecInvalid, n + ": probability outside [0,1]");
  if (l.count_min < 0 || l.count_max < l.count_min) throw Error(ErrorKind::SpecInvalid, n + ": bad count range");
  if (!(l.radius_min_mm > 0.0 && l.radius_max_mm >= l.radius_min_mm))
    throw Error(ErrorKind::SpecInvalid, n + ": bad radius range");
  if (!(l.elongation_min > 0.0 && l.elongation_max >= l.elongation_min))
    throw Error(ErrorKind::SpecInvalid, n + ": bad elongation range");
}

double uniform(std::mt19937_64 &rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

bool chance(std::mt19937_64 &rng, double p) { return p >= 1.0 || (p > 0.0 && uniform(rng, 0.0, 1.0) < p); }

} // namespace

PhantomSpec PhantomSpec::desk() { return {}; }

bool PhantomSpec::operator==(const PhantomSpec &o) const {
  return (shape == o.shape).all() && (native_spacing == o.native_spacing).all() &&
         cord_radius_mm == o.cord_radius_mm && csf_rim_mm == o.csf_rim_mm &&
         curvature_amp_mm == o.curvature_amp_mm && curvature_period_mm == o.curvature_period_mm &&
         cord_mask_diameter_mm == o.cord_mask_diameter_mm && tumor == o.tumor && cavity == o.cavity &&
         edema == o.edema && enhancing_fraction == o.enhancing_fraction && tumor_t2_min == o.tumor_t2_min &&
         tumor_t2_max == o.tumor_t2_max && t2w == o.t2w && t1w == o.t1w && noise_sigma == o.noise_sigma &&
         region_probs == o.region_probs && seed == o.seed;
}

void PhantomSpec::validate() const {
  if ((shape < 8).any()) throw Error(ErrorKind::SpecInvalid, "phantom shape must be >= 8 per axis");
  if ((native_spacing <= 0.0).any()) throw Error(ErrorKind::SpecInvalid, "spacing must be positive");
  if (!(cord_radius_mm > 0.0) || !(csf_rim_mm >= 0.0) || !(curvature_amp_mm >= 0.0) || !(curvature_period_mm > 0.0))
    throw Error(ErrorKind::SpecInvalid, "bad cord geometry");
  if (!(cord_mask_diameter_mm > 0.0)) throw Error(ErrorKind::SpecInvalid, "cord mask diameter must be > 0");
  check_lesion(tumor, "tumor");
  check_lesion(cavity, "cavity");
  check_lesion(edema, "edema");
  if (tumor.radius_max_mm >= cord_radius_mm)
    throw Error(ErrorKind::SpecInvalid, "tumor radius must be smaller than the cord radius");
  if (!(enhancing_fraction >= 0.0 && enhancing_fraction <= 1.0))
    throw Error(ErrorKind::SpecInvalid, "enhancing_fraction outside [0,1]");
  if (!(tumor_t2_max >= tumor_t2_min)) throw Error(ErrorKind::SpecInvalid, "bad tumor T2 range");
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::SpecInvalid, "noise_sigma must be >= 0");
  double sum = 0.0;
  for (double p : region_probs) {
    if (p < 0.0) throw Error(ErrorKind::SpecInvalid, "region probabilities must be >= 0");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorKind::SpecInvalid, "region probabilities must sum to 1");
  const double length_mm = shape[0] * native_spacing[0];
  if (length_mm < 4.0 * tumor.radius_max_mm * tumor.elongation_max)
    throw Error(ErrorKind::SpecInvalid, "field of view too short for the tumor size");
}

void to_json(nlohmann::json &j, const PhantomSpec &s) {
  nlohmann::json tumor, cavity, edema;
  lesion_json(tumor, s.tumor);
  lesion_json(cavity, s.cavity);
  lesion_json(edema, s.edema);
  j = {{"shape", {s.shape[0], s.shape[1], s.shape[2]}},
       {"native_spacing", {s.native_spacing[0], s.native_spacing[1], s.native_spacing[2]}},
       {"cord_radius_mm", s.cord_radius_mm},
       {"csf_rim_mm", s.csf_rim_mm},
       {"curvature_amp_mm", s.curvature_amp_mm},
       {"curvature_period_mm", s.curvature_period_mm},
       {"cord_mask_diameter_mm", s.cord_mask_diameter_mm},
       {"tumor", tumor},
       {"cavity", cavity},
       {"edema", edema},
       {"enhancing_fraction", s.enhancing_fraction},
       {"tumor_t2_min", s.tumor_t2_min},
       {"tumor_t2_max", s.tumor_t2_max},
       {"t2w", rule_json(s.t2w)},
       {"t1w", rule_json(s.t1w)},
       {"noise_sigma", s.noise_sigma},
       {"region_probs", s.region_probs},
       {"seed", s.seed}};
}

void from_json(const nlohmann::json &j, PhantomSpec &s) {
  PhantomSpec d = s;
  try {
    if (j.contains("shape")) {
      const auto v = j.at("shape").get<std::array<int, 3>>();
      d.shape = {v[0], v[1], v[2]};
    }
    if (j.contains("native_spacing")) {
      const auto v = j.at("native_spacing").get<std::array<double, 3>>();
      d.native_spacing = {v[0], v[1], v[2]};
    }
    d.cord_radius_mm = j.value("cord_radius_mm", d.cord_radius_mm);
    d.csf_rim_mm = j.value("csf_rim_mm", d.csf_rim_mm);
    d.curvature_amp_mm = j.value("curvature_amp_mm", d.curvature_amp_mm);
    d.curvature_period_mm = j.value("curvature_period_mm", d.curvature_period_mm);
    d.cord_mask_diameter_mm = j.value("cord_mask_diameter_mm", d.cord_mask_diameter_mm);
    if (j.contains("tumor")) d.tumor = lesion_from(j.at("tumor"), d.tumor);
    if (j.contains("cavity")) d.cavity = lesion_from(j.at("cavity"), d.cavity);
    if (j.contains("edema")) d.edema = lesion_from(j.at("edema"), d.edema);
    d.enhancing_fraction = j.value("enhancing_fraction", d.enhancing_fraction);
    d.tumor_t2_min = j.value("tumor_t2_min", d.tumor_t2_min);
    d.tumor_t2_max = j.value("tumor_t2_max", d.tumor_t2_max);
    if (j.contains("t2w")) d.t2w = rule_from(j.at("t2w"), d.t2w);
    if (j.contains("t1w")) d.t1w = rule_from(j.at("t1w"), d.t1w);
    d.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    if (j.contains("region_probs")) d.region_probs = j.at("region_probs").get<std::array<double, 4>>();
    d.seed = j.value("seed", d.seed);
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorKind::SpecInvalid, e.what());
  }
  s = d;
}

std::vector<Eigen::Vector3d> phantom_centerline(const PhantomSpec &spec, double phase) {
  std::vector<Eigen::Vector3d> pts;
  const double c1 = (spec.shape[1] - 1) / 2.0, c2 = (spec.shape[2] - 1) / 2.0;
  for (int x = 0; x < spec.shape[0]; ++x) {
    const double t = 2.0 * std::numbers::pi * x * spec.native_spacing[0] / spec.curvature_period_mm + phase;
    const double ap = spec.curvature_amp_mm * std::sin(t);
    const double rl = 0.5 * spec.curvature_amp_mm * std::sin(0.5 * t + 1.0);
    pts.emplace_back(x, c1 + ap / spec.native_spacing[1], c2 + rl / spec.native_spacing[2]);
  }
  return pts;
}

SubjectRecord generate_subject(const PhantomSpec &spec, std::mt19937_64 &rng, std::string subject_id) {
  spec.validate();
  Geometry geo;
  geo.shape = spec.shape;
  geo.spacing = spec.native_spacing;
  geo.orientation = Orientation::canonical();

  SubjectRecord s;
  s.subject_id = std::move(subject_id);
  {
    std::discrete_distribution<int> region(spec.region_probs.begin(), spec.region_probs.end());
    s.region_tag = static_cast<RegionTag>(region(rng));
  }
  const double phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const auto centerline = phantom_centerline(spec, phase);
  const Spacing3 &sp = spec.native_spacing;
  const int n0 = spec.shape[0], n1 = spec.shape[1], n2 = spec.shape[2];
  auto mm = [&](int x, int y, int z) { return Eigen::Vector3d(x * sp[0], y * sp[1], z * sp[2]); };
  auto on_axis = [&](double x_vox) {
    const int i = std::clamp(static_cast<int>(std::lround(x_vox)), 0, n0 - 1);
    return Eigen::Vector3d(centerline[i][0] * sp[0], centerline[i][1] * sp[1], centerline[i][2] * sp[2]);
  };
  // in-plane distance to the centerline of the same SI row
  auto radial = [&](int x, int y, int z) {
    const Eigen::Vector3d &c = centerline[x];
    return std::hypot((y - c[1]) * sp[1], (z - c[2]) * sp[2]);
  };

  // lesions: one tumor anchors the cavity (adjacent in SI) and the edema (around it)
  std::vector<Ellipsoid> tumors, cavities, edemas;
  const double length_mm = n0 * sp[0];
  auto draw_count = [&](const LesionSpec &l) {
    if (!chance(rng, l.probability)) return 0;
    return std::uniform_int_distribution<int>(l.count_min, l.count_max)(rng);
  };
  const int n_tumor = draw_count(spec.tumor);
  const int n_cavity = draw_count(spec.cavity);
  const int n_edema = draw_count(spec.edema);
  std::vector<bool> enhancing;
  std::vector<double> tumor_t2;
  for (int k = 0; k < n_tumor; ++k) {
    Ellipsoid e;
    e.r_cross = uniform(rng, spec.tumor.radius_min_mm, spec.tumor.radius_max_mm);
    e.r_si = e.r_cross * uniform(rng, spec.tumor.elongation_min, spec.tumor.elongation_max);
    const double margin = std::min(0.45 * length_mm, e.r_si + 0.15 * length_mm);
    const double si_mm = uniform(rng, margin, length_mm - margin);
    e.center_mm = on_axis(si_mm / sp[0]);
    e.center_mm[0] = si_mm;
    tumors.push_back(e);
    enhancing.push_back(chance(rng, spec.enhancing_fraction));
    tumor_t2.push_back(uniform(rng, spec.tumor_t2_min, spec.tumor_t2_max));
  }
  // without a tumor, cavities and edema float freely inside the cord
  auto anchor = [&](int k) -> std::optional<Ellipsoid> {
    if (tumors.empty()) return std::nullopt;
    return tumors[k % tumors.size()];
  };
  for (int k = 0; k < n_cavity; ++k) {
    Ellipsoid e;
    e.r_cross = std::min(uniform(rng, spec.cavity.radius_min_mm, spec.cavity.radius_max_mm), spec.cord_radius_mm - 1.0);
    e.r_si = e.r_cross * uniform(rng, spec.cavity.elongation_min, spec.cavity.elongation_max);
    double si_mm;
    if (auto t = anchor(k)) {
      const double dir = chance(rng, 0.5) ? 1.0 : -1.0;
      si_mm = t->center_mm[0] + dir * (t->r_si + 0.8 * e.r_si);
    } else {
      si_mm = uniform(rng, e.r_si, length_mm - e.r_si);
    }
    si_mm = std::clamp(si_mm, 0.0, length_mm - sp[0]);
    e.center_mm = on_axis(si_mm / sp[0]);
    e.center_mm[0] = si_mm;
    cavities.push_back(e);
  }
  for (int k = 0; k < n_edema; ++k) {
    Ellipsoid e;
    e.r_cross = uniform(rng, spec.edema.radius_min_mm, spec.edema.radius_max_mm);
    if (auto t = anchor(k)) {
      e.center_mm = t->center_mm;
      e.r_si = (t->r_si + e.r_cross) * uniform(rng, spec.edema.elongation_min, spec.edema.elongation_max);
    } else {
      e.r_si = e.r_cross * uniform(rng, spec.edema.elongation_min, spec.edema.elongation_max);
      const double si_mm = uniform(rng, e.r_si, length_mm - e.r_si);
      e.center_mm = on_axis(si_mm / sp[0]);
      e.center_mm[0] = si_mm;
    }
    edemas.push_back(e);
  }

  LabelSet gt(geo);
  s.t2w = Volume3D(geo);
  s.t1w_gd = Volume3D(geo);
  std::normal_distribution<float> noise(0.f, static_cast<float>(spec.noise_sigma));
  const double csf_r = spec.cord_radius_mm + spec.csf_rim_mm;
  for (int z = 0; z < n2; ++z)
    for (int y = 0; y < n1; ++y)
      for (int x = 0; x < n0; ++x) {
        const double r = radial(x, y, z);
        double t2 = spec.t2w.background, t1 = spec.t1w.background;
        if (r <= csf_r) {
          t2 = spec.t2w.csf;
          t1 = spec.t1w.csf;
        }
        if (r <= spec.cord_radius_mm) {
          t2 = spec.t2w.cord;
          t1 = spec.t1w.cord;
          const Eigen::Vector3d p = mm(x, y, z);
          int tumor_k = -1;
          for (std::size_t k = 0; k < tumors.size() && tumor_k < 0; ++k)
            if (tumors[k].contains(p)) tumor_k = static_cast<int>(k);
          bool in_cavity = false, in_edema = false;
          if (tumor_k < 0)
            for (const Ellipsoid &e : cavities) in_cavity = in_cavity || e.contains(p);
          if (tumor_k < 0 && !in_cavity)
            for (const Ellipsoid &e : edemas) in_edema = in_edema || e.contains(p);
          if (tumor_k >= 0) {
            gt[LabelClass::Tumor](x, y, z) = 1.f;
            t2 = tumor_t2[tumor_k];
            t1 = enhancing[tumor_k] ? spec.t1w.tumor_enhancing : spec.t1w.tumor_plain;
          } else if (in_cavity) {
            gt[LabelClass::Cavity](x, y, z) = 1.f;
            t2 = spec.t2w.cavity;
            t1 = spec.t1w.cavity;
          } else if (in_edema) {
            gt[LabelClass::Edema](x, y, z) = 1.f;
            t2 = spec.t2w.edema;
            t1 = spec.t1w.edema;
          }
        }
        s.t2w.data(x, y, z) = static_cast<float>(t2) + noise(rng);
        s.t1w_gd.data(x, y, z) = static_cast<float>(t1) + noise(rng);
      }
  gt.recompute_whole();
  s.gt = std::move(gt);
  s.cord_mask = centerline_to_mask(centerline, spec.cord_mask_diameter_mm, geo);
  return s;
}

std::vector<ManifestEntry> generate_dataset(int n, const PhantomSpec &spec, std::uint64_t seed,
                                            const std::filesystem::path &out_dir) {
  if (n < 1) throw Error(ErrorKind::SpecInvalid, "n must be >= 1");
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<ManifestEntry> entries;
  for (int i = 0; i < n; ++i) {
    char id[32];
    std::snprintf(id, sizeof(id), "sub-%03d", i);
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(i), 0x7068));
    const SubjectRecord s = generate_subject(spec, rng, id);
    const std::filesystem::path dir = out_dir / id;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw Error(ErrorKind::IoFailure, "cannot create " + dir.string());

    ManifestEntry e;
    e.subject_id = id;
    e.region_tag = s.region_tag;
    e.t2w = dir / (std::string(id) + "_T2w.nii.gz");
    e.t1w_gd = dir / (std::string(id) + "_T1w-Gd.nii.gz");
    write_volume(s.t2w, e.t2w);
    write_volume(s.t1w_gd, e.t1w_gd);
    auto write_label = [&](LabelClass c, std::optional<std::filesystem::path> &slot) {
      const SoftMask &m = (*s.gt)[c];
      if (Eigen::Tensor<float, 0>(m.maximum())() == 0.f) return;
      const std::filesystem::path p = dir / (std::string(id) + "_" + std::string(kClassNames[int(c)]) + ".nii.gz");
      write_mask(MaskVolume(m.cast<std::uint8_t>(), s.t2w.geometry()), p);
      slot = p;
    };
    write_label(LabelClass::Tumor, e.tumor);
    write_label(LabelClass::Cavity, e.cavity);
    write_label(LabelClass::Edema, e.edema);
    e.cord_mask = dir / (std::string(id) + "_cordmask.nii.gz");
    write_mask(*s.cord_mask, *e.cord_mask);
    entries.push_back(std::move(e));
  }
  write_manifest(entries, out_dir / "manifest.json");
  std::ofstream spec_out(out_dir / "phantom_spec.json");
  if (!spec_out) throw Error(ErrorKind::IoFailure, "cannot write phantom_spec.json");
  nlohmann::json j = spec;
  j["n"] = n;
  j["dataset_seed"] = seed;
  spec_out << j.dump(2) << '\n';
  return entries;
}

} // namespace cordseg
