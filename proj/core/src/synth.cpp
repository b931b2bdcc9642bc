#include "adbench/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>

namespace adbench::synth {

namespace fs = std::filesystem;
using cohort::CanonicalDx;

double PhantomSpec::factor(CanonicalDx dx) const {
  switch (dx) {
    case CanonicalDx::CN: return factor_cn;
    case CanonicalDx::MCI: return factor_mci;
    case CanonicalDx::AD: return factor_ad;
  }
  return 1.0;
}

void PhantomSpec::validate() const {
  for (double f : {factor_cn, factor_mci, factor_ad})
    if (!(f > 0.0 && f <= 1.0))
      throw ConfigError(msg("hypometabolism factor must be in (0,1], got ", f));
  for (const auto& r : regions) {
    // probe the region's axis extremes and box corners against the brain
    for (int corner = 0; corner < 14; ++corner) {
      double p[3];
      if (corner < 6) {
        for (int a = 0; a < 3; ++a) p[a] = r.center[a];
        p[corner / 2] += (corner % 2 ? 1.0 : -1.0) * r.axes[corner / 2];
      } else {
        const int c = corner - 6;
        for (int a = 0; a < 3; ++a)
          p[a] = r.center[a] + ((c >> a) & 1 ? 1.0 : -1.0) * r.axes[a] / std::sqrt(3.0);
      }
      if (!brain.contains(p[0], p[1], p[2]))
        throw ConfigError(msg("hypometabolic region centered at (", r.center[0],
                              ",", r.center[1], ",", r.center[2],
                              ") extends outside the brain ellipsoid"));
    }
  }
}

void CohortSpec::validate() const {
  if (subjects < 1) throw ConfigError("cohort must have at least one subject");
  if (!(intensity_scale > 0.0))
    throw ConfigError(msg("intensity scale must be > 0, got ", intensity_scale));
  if (noise_sigma < 0.0) throw ConfigError("noise sigma must be >= 0");
  const double total = mixture[0] + mixture[1] + mixture[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw ConfigError(msg("class mixture must sum to 1, got ", total));
  for (double p : mixture)
    if (p < 0.0) throw ConfigError("class mixture entries must be >= 0");
  for (int i = 0; i < 3; ++i) {
    if (dims[i] < 1) throw ConfigError("cohort dims must be >= 1");
    if (!(spacing[i] > 0.0)) throw ConfigError("cohort spacing must be > 0");
  }
  phantom.validate();
}

CohortSpec adni_like_spec(bool small) {
  CohortSpec s;
  s.name = "adni-like";
  s.longitudinal = true;
  s.mixture = {0.35, 0.30, 0.35};
  if (small) {
    s.dims = {40, 40, 24};
    s.spacing = {6.0, 6.0, 6.0};
  } else {
    s.dims = {160, 160, 96};
    s.spacing = {1.5, 1.5, 1.5};
  }
  return s;
}

CohortSpec fleni_like_spec(bool small) {
  CohortSpec s;
  s.name = "fleni-like";
  s.longitudinal = false;
  s.mixture = {0.5, 0.0, 0.5};
  if (small) {
    s.dims = {32, 32, 12};
    s.spacing = {8.0, 8.0, 13.08};
  } else {
    s.dims = {128, 128, 47};
    s.spacing = {2.0, 2.0, 3.27};
  }
  return s;
}

std::vector<CanonicalDx> assign_classes(const CohortSpec& spec, std::uint64_t seed) {
  const std::size_t n = spec.subjects;
  // largest-remainder apportionment keeps every class within one subject
  // of its exact share
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int c = 0; c < 3; ++c) {
    const double exact = spec.mixture[static_cast<std::size_t>(c)] * static_cast<double>(n);
    counts[static_cast<std::size_t>(c)] = static_cast<std::size_t>(std::floor(exact));
    frac[static_cast<std::size_t>(c)] = exact - std::floor(exact);
    assigned += counts[static_cast<std::size_t>(c)];
  }
  std::array<int, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (frac[static_cast<std::size_t>(a)] != frac[static_cast<std::size_t>(b)])
      return frac[static_cast<std::size_t>(a)] > frac[static_cast<std::size_t>(b)];
    return a < b;
  });
  for (int i = 0; assigned < n; ++i, ++assigned)
    ++counts[static_cast<std::size_t>(order[static_cast<std::size_t>(i % 3)])];

  std::vector<CanonicalDx> classes;
  classes.reserve(n);
  for (int c = 0; c < 3; ++c)
    classes.insert(classes.end(), counts[static_cast<std::size_t>(c)],
                   static_cast<CanonicalDx>(c));
  Rng rng = make_rng(mix_seed(seed, 0xc1a55e5ULL));
  std::shuffle(classes.begin(), classes.end(), rng);
  return classes;
}

namespace {

vol::Volume render_phantom(const CohortSpec& spec, const PhantomSpec& ph,
                           CanonicalDx dx, double base_intensity,
                           const Ellipsoid& brain, Rng& noise_rng) {
  vol::Volume v(spec.dims, spec.spacing);
  const double factor = ph.factor(dx);
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  std::size_t i = 0;
  for (std::size_t z = 0; z < spec.dims[2]; ++z) {
    const double fz = (static_cast<double>(z) + 0.5) / static_cast<double>(spec.dims[2]);
    for (std::size_t y = 0; y < spec.dims[1]; ++y) {
      const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(spec.dims[1]);
      for (std::size_t x = 0; x < spec.dims[0]; ++x, ++i) {
        const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(spec.dims[0]);
        double val = 0.0;
        if (brain.contains(fx, fy, fz)) {
          val = base_intensity;
          for (const auto& r : ph.regions)
            if (r.contains(fx, fy, fz)) {
              val *= factor;
              break;
            }
        }
        val = spec.intensity_scale * val + spec.intensity_offset;
        if (spec.noise_sigma > 0.0) val += noise(noise_rng);
        v.voxels[i] = static_cast<float>(val);
      }
    }
  }
  return v;
}

std::string visit_date(std::size_t visit_index, Rng& rng) {
  const int year = 2006 + static_cast<int>(visit_index);
  std::uniform_int_distribution<int> month(1, 12);
  std::uniform_int_distribution<int> day(1, 28);
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02d", year, month(rng), day(rng));
  return buf;
}

cohort::Dx to_raw(CanonicalDx dx) {
  switch (dx) {
    case CanonicalDx::CN: return cohort::Dx::CN;
    case CanonicalDx::MCI: return cohort::Dx::MCI;
    case CanonicalDx::AD: return cohort::Dx::AD;
  }
  return cohort::Dx::CN;
}

}  // namespace

SubjectData generate_subject(const CohortSpec& spec, std::uint64_t cohort_seed,
                             std::size_t subject_index) {
  spec.validate();
  const auto classes = assign_classes(spec, cohort_seed);
  if (subject_index >= classes.size())
    throw ConfigError(msg("subject index ", subject_index, " out of range"));
  const CanonicalDx final_dx = classes[subject_index];

  Rng rng = make_rng(mix_seed(cohort_seed, subject_index, 0x5b1ULL));
  const PhantomSpec& ph = spec.phantom;

  // per-subject anatomy and intensity jitter
  Ellipsoid brain = ph.brain;
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (int a = 0; a < 3; ++a)
    brain.axes[a] *= 1.0 + ph.shape_jitter * unit(rng);
  const double base_intensity = 1.0 + ph.intensity_jitter * unit(rng);

  // monotone diagnosis trajectory ending at the subject's class
  std::vector<CanonicalDx> trajectory;
  if (!spec.longitudinal) {
    trajectory = {final_dx};
  } else {
    std::uniform_int_distribution<int> nvisits_dist(1, 3);
    const int nvisits = nvisits_dist(rng);
    const int final_stage = static_cast<int>(final_dx);
    std::uniform_int_distribution<int> start_dist(0, final_stage);
    const int start_stage = start_dist(rng);
    for (int i = 0; i < nvisits; ++i) {
      // advance linearly from start to final across the visits
      const int stage =
          nvisits == 1
              ? final_stage
              : start_stage + (final_stage - start_stage) * i / (nvisits - 1);
      trajectory.push_back(static_cast<CanonicalDx>(stage));
    }
  }

  char sid[16];
  std::snprintf(sid, sizeof(sid), "S%04zu", subject_index);

  SubjectData out;
  for (std::size_t vi = 0; vi < trajectory.size(); ++vi) {
    Rng visit_rng = make_rng(mix_seed(cohort_seed, subject_index, 0xda7eULL + vi));
    cohort::VisitRecord rec;
    rec.subject_id = sid;
    rec.scan_id = std::string(sid) + "_V" + std::to_string(vi + 1);
    rec.acquisition_date = visit_date(vi, visit_rng);
    rec.diagnosis = to_raw(trajectory[vi]);
    out.visits.push_back(rec);
    out.volumes.push_back(
        render_phantom(spec, ph, trajectory[vi], base_intensity, brain, visit_rng));
  }
  return out;
}

std::vector<cohort::VisitRecord> generate_cohort(const CohortSpec& spec,
                                                 std::uint64_t seed,
                                                 const std::string& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  std::vector<cohort::VisitRecord> manifest;
  for (std::size_t i = 0; i < spec.subjects; ++i) {
    SubjectData subject = generate_subject(spec, seed, i);
    for (std::size_t vi = 0; vi < subject.visits.size(); ++vi) {
      cohort::VisitRecord rec = subject.visits[vi];
      rec.volume_path = rec.scan_id + ".vol";
      vol::save_volume(subject.volumes[vi], (fs::path(out_dir) / rec.volume_path).string());
      manifest.push_back(rec);
    }
  }
  cohort::save_manifest(manifest, (fs::path(out_dir) / "manifest.csv").string());
  return manifest;
}

void inject_domain_shift(vol::Volume& v, double scale, double offset,
                         double sigma, std::uint64_t seed) {
  if (!(scale > 0.0)) throw ConfigError(msg("shift scale must be > 0, got ", scale));
  Rng rng = make_rng(mix_seed(seed, 0x5417fULL));
  std::normal_distribution<double> noise(0.0, sigma);
  for (auto& x : v.voxels) {
    double val = scale * static_cast<double>(x) + offset;
    if (sigma > 0.0) val += noise(rng);
    x = static_cast<float>(val);
  }
}

}  // namespace adbench::synth
