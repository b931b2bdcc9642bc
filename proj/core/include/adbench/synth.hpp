#pragma once

// Deterministic phantom FDG-PET cohort generator. Class signal is a
// class-dependent attenuation of two fixed ellipsoidal posterior-lateral
// regions inside an ellipsoidal brain; cohorts add an affine intensity
// shift and Gaussian noise to model acquisition differences.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "adbench/cohort.hpp"
#include "adbench/volume.hpp"

namespace adbench::synth {

struct Ellipsoid {
  std::array<double, 3> center{0.5, 0.5, 0.5};  // fractions of the extent
  std::array<double, 3> axes{0.4, 0.4, 0.4};    // semi-axes, fractions

  bool contains(double fx, double fy, double fz) const {
    const double dx = (fx - center[0]) / axes[0];
    const double dy = (fy - center[1]) / axes[1];
    const double dz = (fz - center[2]) / axes[2];
    return dx * dx + dy * dy + dz * dz <= 1.0;
  }
};

struct PhantomSpec {
  double factor_cn = 1.0;
  double factor_mci = 0.85;
  double factor_ad = 0.7;
  Ellipsoid brain{{0.5, 0.5, 0.5}, {0.38, 0.42, 0.40}};
  std::vector<Ellipsoid> regions{
      {{0.35, 0.62, 0.55}, {0.09, 0.09, 0.09}},
      {{0.65, 0.62, 0.55}, {0.09, 0.09, 0.09}},
  };
  double shape_jitter = 0.03;      // relative per-subject axis jitter
  double intensity_jitter = 0.05;  // relative per-subject base intensity jitter

  double factor(cohort::CanonicalDx dx) const;
  void validate() const;  // regions must sit inside the brain ellipsoid
};

struct CohortSpec {
  std::string name = "adni-like";
  std::array<std::size_t, 3> dims{160, 160, 96};
  std::array<double, 3> spacing{1.5, 1.5, 1.5};
  double intensity_scale = 1.0;
  double intensity_offset = 0.0;
  double noise_sigma = 0.1;
  // class mixture over {CN, MCI, AD}; must sum to 1
  std::array<double, 3> mixture{0.5, 0.0, 0.5};
  std::size_t subjects = 100;
  // ADNI-like cohorts are longitudinal: 1-3 visits with monotone
  // CN -> MCI -> AD progressions ending at the subject's class.
  bool longitudinal = false;
  PhantomSpec phantom;

  void validate() const;
};

// Factory presets matching the two cohort geometries. `small` scales the
// grid down for desk-scale runs.
CohortSpec adni_like_spec(bool small = false);
CohortSpec fleni_like_spec(bool small = false);

struct SubjectData {
  std::vector<cohort::VisitRecord> visits;  // volume_path left empty
  std::vector<vol::Volume> volumes;         // parallel to visits
};

// Pure function of (spec, cohort_seed, subject_index).
SubjectData generate_subject(const CohortSpec& spec, std::uint64_t cohort_seed,
                             std::size_t subject_index);

// Writes volumes and manifest.csv under out_dir; returns the visit records
// (volume_path relative to out_dir).
std::vector<cohort::VisitRecord> generate_cohort(const CohortSpec& spec,
                                                 std::uint64_t seed,
                                                 const std::string& out_dir);

// x -> scale*x + offset + N(0, sigma), applied voxelwise.
void inject_domain_shift(vol::Volume& v, double scale, double offset,
                         double sigma, std::uint64_t seed);

// Deterministic per-subject class assignment realizing the mixture within
// +-1 subject per class.
std::vector<cohort::CanonicalDx> assign_classes(const CohortSpec& spec,
                                                std::uint64_t seed);

}  // namespace adbench::synth
