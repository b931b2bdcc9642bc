#pragma once

// Experiment orchestration: config parsing with field-path diagnostics,
// config hashing, the preprocess -> label -> split -> cross-validate ->
// external-evaluate pipeline, append-only results persistence, the ablation
// grid, and result-table rendering.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "adbench/cohort.hpp"
#include "adbench/models.hpp"
#include "adbench/train.hpp"
#include "adbench/volume.hpp"

namespace adbench::exp {

struct ExternalCohort {
  std::string name;
  std::string manifest;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string train_manifest;
  std::vector<ExternalCohort> externals;
  models::ModelConfig model;
  cohort::Labeling labeling = cohort::Labeling::Visit953;
  vol::NormMode normalization = vol::NormMode::ZScorePerImage;
  cohort::Selection selection = cohort::Selection::First;
  std::array<std::size_t, 3> grid{128, 128, 77};
  int folds = 10;
  train::TrainConfig tc;
  std::string out_dir = "runs";

  void validate() const;
};

// Parses the JSON config file; schema violations report the field path.
ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::string& origin = "config");

// FNV-1a over the canonical (sorted-key) JSON form.
std::string config_hash(const ExperimentConfig& cfg);

// One (model x labeling x slices x normalization x selection x fold x split)
// result row.
struct ExperimentRecord {
  std::string model;
  std::string labeling;
  int classes = 0;
  int slices = 0;
  std::string normalization;
  std::string selection;
  int fold = 0;
  std::string split;  // "adni_test" or "external_<name>"
  double auc = 0.0;
  double accuracy = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  int best_epoch = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string timestamp;

  std::string unique_key() const;
};

std::vector<ExperimentRecord> load_records(const std::string& csv_path);
// Appends records, enforcing key uniqueness against existing rows.
void append_records(const std::string& csv_path,
                    const std::vector<ExperimentRecord>& records);
// Drops every row carrying one of the given config hashes (used by --force).
void remove_records_by_hash(const std::string& csv_path,
                            const std::vector<std::string>& hashes);

struct RunOutcome {
  std::vector<ExperimentRecord> records;
  bool skipped = false;  // config hash already present and not forced
};

RunOutcome run_experiment(const ExperimentConfig& cfg, bool force = false);

// Ablation grid: axes are value lists for model/labeling/slices/
// normalization/selection; invalid combinations are skipped with a reason.
struct AblationOutcome {
  std::vector<ExperimentRecord> records;
  std::vector<std::string> skipped;  // "combo: reason" lines
  int executed = 0;
};

AblationOutcome run_ablation(const std::string& grid_json_path, bool force = false);

// Markdown table in the merged-results layout, one row per configuration,
// "mean (std)" AUC cells per split column.
std::string render_results_table(const std::vector<ExperimentRecord>& records);

std::string iso_timestamp_utc();

}  // namespace adbench::exp
