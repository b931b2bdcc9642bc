#pragma once

// Training loop with augmentation, inverse-frequency weighted loss, early
// stopping on validation AUC, k-fold cross-validation, and external-cohort
// evaluation without fine-tuning.

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "adbench/cohort.hpp"
#include "adbench/models.hpp"
#include "adbench/volume.hpp"

namespace adbench::train {

struct AugmentConfig {
  bool enabled = true;
  double rotate_deg = 10.0;        // uniform in +-rotate_deg
  double flip_prob = 0.5;
  double intensity_jitter = 0.1;   // multiplicative, uniform in +-jitter
  double noise_sigma = 0.05;       // of the sample's intensity range
};

struct TrainConfig {
  double lr = 5e-4;
  int batch_size = 8;
  int max_epochs = 100;
  int patience = 30;
  double min_delta = 1e-4;   // required validation AUC improvement
  std::uint64_t seed = 1;
  bool weighted_loss = true;
  AugmentConfig augment;

  void validate() const;
};

// Table defaults per architecture: inception trains with lr 1e-4 and batch
// 32, the other two with lr 5e-4 and batch 8; all use 100 epochs and
// patience 30.
TrainConfig default_train_config(models::ModelKind kind);

// Stops once `patience` epochs have elapsed after the best epoch without an
// improvement greater than min_delta.
struct EarlyStopping {
  int patience = 30;
  double min_delta = 1e-4;
  double best_value = -1.0;
  int best_epoch = 0;

  // epoch counts from 1; returns true when this epoch is a new best
  bool update(int epoch, double value) {
    if (value > best_value + min_delta || best_epoch == 0) {
      best_value = value;
      best_epoch = epoch;
      return true;
    }
    return false;
  }
  bool should_stop(int epoch) const { return epoch - best_epoch >= patience; }
};

// ---- data assembly ----

// Per-sample slice views consumed by the models (pre-augmentation).
struct SampleViews {
  std::vector<vol::Slice2D> axial;
  std::vector<vol::Slice2D> coronal;   // AllPlanes only
  std::vector<vol::Slice2D> sagittal;  // AllPlanes only
};

// In-plane augmentation applied consistently to every slice of the sample:
// rotation, horizontal flip, multiplicative intensity jitter, additive
// Gaussian noise. Deterministic in the seed.
void augment_views(SampleViews& views, const AugmentConfig& cfg, std::uint64_t seed);

void flip_horizontal(vol::Slice2D& s);
vol::Slice2D rotate_bilinear(const vol::Slice2D& s, double degrees);

// Loads, resamples and caches volumes referenced by manifest-relative paths.
class DataCache {
 public:
  DataCache(std::string root_dir, std::array<std::size_t, 3> grid,
            double mask_tau = 0.1);

  const vol::Volume& resampled(const std::string& volume_path);
  const std::vector<std::uint8_t>& mask(const std::string& volume_path);
  const std::array<std::size_t, 3>& grid() const { return grid_; }
  double mask_tau() const { return mask_tau_; }

 private:
  std::string root_;
  std::array<std::size_t, 3> grid_;
  double mask_tau_;
  std::map<std::string, vol::Volume> volumes_;
  std::map<std::string, std::vector<std::uint8_t>> masks_;
};

struct TrainContext {
  DataCache* cache = nullptr;
  vol::NormalizationSpec norm;
  int slices = 16;          // model slice mode
  int num_classes = 2;
  int positive_class = 1;   // AD index
};

SampleViews make_views(const vol::Volume& normalized, models::InputKind kind,
                       int slices, std::array<std::size_t, 3> grid);

models::Batch<float> pack_batch(models::InputKind kind,
                                const std::vector<SampleViews>& views,
                                const std::vector<int>& labels);

// ---- training ----

struct SplitMetrics {
  double auc = 0.0;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

struct FoldResult {
  int fold = 0;
  int best_epoch = 0;
  int epochs_trained = 0;
  SplitMetrics val;
  SplitMetrics test;
  std::string checkpoint_path;
  std::vector<double> val_auc_trace;
};

// Train on split.train with early stopping on split.val AUC; restores the
// best parameters, evaluates split.test, optionally writes a checkpoint.
FoldResult train_fold(models::Model<float>& model, const cohort::FoldSplit& split,
                      const TrainContext& ctx, const TrainConfig& cfg, int fold,
                      const std::string& checkpoint_path = "",
                      const std::string& config_hash = "");

// Eval-mode metrics on an arbitrary labeled sample set; never mutates the
// model.
SplitMetrics evaluate_split(models::Model<float>& model,
                            const std::vector<cohort::LabeledSample>& samples,
                            const TrainContext& ctx);

// Scan-level labels for an external (biomarker-labeled) cohort. Binary
// models require a CN/AD manifest; ternary models accept CN/MCI/AD and are
// scored against AD as the positive class.
std::vector<cohort::LabeledSample> label_external(
    const std::vector<cohort::VisitRecord>& visits, int num_classes);

struct CrossValResult {
  std::vector<FoldResult> folds;
};

// Called after each fold with the model restored to its best parameters and
// the fold's effective context (carries the fold's training-split global
// stats when normalization is global). Used for external evaluation and
// record persistence.
using FoldHook = std::function<void(int fold, models::Model<float>& model,
                                    const FoldResult&, const TrainContext&)>;

CrossValResult cross_validate(const models::ModelConfig& mcfg,
                              const cohort::LabelingOutcome& labeled,
                              const cohort::SplitPlan& plan,
                              cohort::Selection selection, TrainContext& ctx,
                              const TrainConfig& cfg,
                              const std::string& checkpoint_dir = "",
                              const std::string& config_hash = "",
                              const FoldHook& hook = {});

}  // namespace adbench::train
