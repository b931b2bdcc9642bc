#pragma once

// Occlusion sensitivity maps: mask spatial patches of the input and record
// the drop in the target class probability.

#include <functional>
#include <string>

#include "adbench/models.hpp"
#include "adbench/train.hpp"
#include "adbench/volume.hpp"

namespace adbench::occl {

enum class Baseline { Zero, ImageMean };
enum class Target { Predicted, Given };

Baseline parse_baseline(const std::string& name);

struct OcclusionConfig {
  std::size_t patch = 16;
  std::size_t stride = 8;
  Baseline baseline = Baseline::Zero;
  Target target = Target::Predicted;
  int given_label = -1;   // required when target == Given
  int axial_slice = -1;   // volume-input models: slice to occlude (-1 = middle)

  void validate(std::size_t image_h, std::size_t image_w) const;
};

struct RelevanceMap {
  // relevance(p) = f_c(x) - f_c(x with patch p replaced by the baseline),
  // one value per stride-aligned patch position
  std::size_t grid_h = 0, grid_w = 0;
  std::vector<double> grid;
  // overlapping patch relevances averaged into input pixel space
  std::size_t image_h = 0, image_w = 0;
  std::vector<double> pixel;
  // provenance
  std::string model_id, sample_id;
  std::size_t patch = 0, stride = 0;
  std::string baseline;
  int target_class = -1;
};

// Generic engine over any probability functional of a 2-D image.
RelevanceMap occlusion_map(const std::function<double(const vol::Slice2D&)>& prob_fn,
                           const vol::Slice2D& image, const OcclusionConfig& cfg);

// Occlusion for a trained model on one preprocessed sample. Montage-space
// for 16-slice models (patches cross slice boundaries through the 4x4
// grid); for volume-input transformers, patches occlude one chosen axial
// slice in volume space.
RelevanceMap model_occlusion(models::Model<float>& model,
                             const vol::Volume& preprocessed,
                             const train::TrainContext& ctx,
                             const OcclusionConfig& cfg,
                             const std::string& sample_id = "");

// Writes `<base>.relevance.csv` (raw grid values) and
// `<base>.relevance.pgm` (binary P5, min-max scaled pixel map; a constant
// map renders as all zeros).
void export_heatmap(const RelevanceMap& map, const std::string& base_path);

}  // namespace adbench::occl
