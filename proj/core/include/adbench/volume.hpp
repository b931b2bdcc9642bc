#pragma once

// Volume ingestion, brain masking, nearest-neighbor resampling to the
// uniform grid, intensity normalization variants, axial slice selection,
// and montage / anatomical-plane extraction.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adbench/common.hpp"

namespace adbench::vol {

// 3-D scalar field with voxel spacing metadata, X-fastest memory order.
struct Volume {
  std::array<std::size_t, 3> dims{0, 0, 0};   // X, Y, Z voxel counts
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  std::vector<float> voxels;

  Volume() = default;
  Volume(std::array<std::size_t, 3> d, std::array<double, 3> s)
      : dims(d), spacing(s), voxels(d[0] * d[1] * d[2], 0.0f) {
    validate_header();
  }

  std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return (z * dims[1] + y) * dims[0] + x;
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const {
    return voxels[index(x, y, z)];
  }
  float& at(std::size_t x, std::size_t y, std::size_t z) {
    return voxels[index(x, y, z)];
  }

  void validate_header() const;
  void validate() const;
};

enum class NormMode { ZScorePerImage, ZScoreGlobal, MinMax };

std::string to_string(NormMode mode);
NormMode parse_norm_mode(const std::string& name);

// Fixed dataset statistics for global z-scoring, with provenance recording
// which split produced them (they must come from training data only).
struct GlobalStats {
  double mean = 0.0;
  double stddev = 1.0;
  std::string provenance;
};

struct NormalizationSpec {
  NormMode mode = NormMode::ZScorePerImage;
  std::optional<GlobalStats> global;
};

// ---- file format ----
// `<name>.vol.json` sidecar + `<name>.vol.raw` payload (little-endian f32,
// X-fastest). Accepts the base path, the sidecar path, or the payload path.

void save_volume(const Volume& v, const std::string& path);
void save_preprocessed(const Volume& v, const std::string& path,
                       const NormalizationSpec& spec);
Volume load_volume(const std::string& path);

// Path of the preprocessed twin of a raw volume: `name.vol` -> `name.prep.vol`.
std::string prep_path(const std::string& volume_path);

// ---- operations ----

// Foreground threshold at lo + tau*(hi - lo), where lo/hi are the robust
// 1st/99th intensity percentiles. The robust-range reference keeps the mask
// invariant under positive affine intensity transforms.
std::vector<std::uint8_t> brain_mask(const Volume& v, double tau = 0.1);

Volume resample_nn(const Volume& v, std::array<std::size_t, 3> target_dims);

struct NormalizeResult {
  Volume volume;
  bool degenerate = false;   // sigma or range was zero; output forced to zeros
  std::string warning;
};

// Statistics are computed over the brain mask (supplied or recomputed).
NormalizeResult normalize(const Volume& v, const NormalizationSpec& spec,
                          const std::vector<std::uint8_t>* mask = nullptr);

// Single-pass accumulator for training-split global statistics.
struct GlobalStatsAccumulator {
  double sum = 0.0, sumsq = 0.0;
  std::size_t count = 0;

  void add(const Volume& v, const std::vector<std::uint8_t>& mask);
  GlobalStats finalize(const std::string& provenance) const;
};

// Centered equidistant axial indices: floor((k + 0.5) * Z / K).
std::vector<std::size_t> select_axial_indices(std::size_t z_count, std::size_t k = 16);

struct Slice2D {
  std::size_t h = 0, w = 0;
  std::vector<float> pix;  // row-major

  Slice2D() = default;
  Slice2D(std::size_t h_, std::size_t w_) : h(h_), w(w_), pix(h_ * w_, 0.0f) {}
  const float& at(std::size_t r, std::size_t c) const { return pix[r * w + c]; }
  float& at(std::size_t r, std::size_t c) { return pix[r * w + c]; }
};

struct SliceSet {
  std::vector<Slice2D> slices;
  std::vector<std::size_t> source_indices;
};

SliceSet select_axial_slices(const Volume& v, std::size_t k = 16);

// 4x4 row-major tiling of exactly 16 same-sized slices.
Slice2D make_grid_montage(const SliceSet& s);
// Inverse of make_grid_montage; recovers the 16 cells.
SliceSet split_grid_montage(const Slice2D& montage);

// Zero-pad (centered) to a target size.
Slice2D pad_to(const Slice2D& s, std::size_t h, std::size_t w);

struct PlaneSlices {
  SliceSet axial, coronal, sagittal;
  std::size_t encoder_h = 0, encoder_w = 0;
};

// All slices of the three anatomical planes, padded to a common square
// encoder input of side max(X,Y,Z). The volume must already be on the
// expected uniform grid.
PlaneSlices extract_plane_slices(const Volume& v,
                                 std::array<std::size_t, 3> expected_dims);

struct PreprocessConfig {
  std::array<std::size_t, 3> grid{128, 128, 77};
  NormalizationSpec norm;
  double mask_tau = 0.1;
};

// resample -> mask -> normalize
NormalizeResult preprocess_volume(const Volume& raw, const PreprocessConfig& cfg);

}  // namespace adbench::vol
