#pragma once

// Longitudinal diagnosis normalization, the visit953 and last labeling
// strategies, sample selection, stratified subject-level k-fold splitting,
// and inverse-frequency class weights.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "adbench/common.hpp"

namespace adbench::cohort {

// Raw clinical codes as they appear in manifests.
enum class Dx { CN, SMC, EMCI, MCI, LMCI, AD };

Dx parse_dx(const std::string& code);
std::string to_string(Dx d);

// Canonical classes after merging EMCI/LMCI/MCI and dropping SMC.
enum class CanonicalDx { CN, MCI, AD };

std::string to_string(CanonicalDx d);

// SMC records are dropped (nullopt); EMCI/LMCI/MCI merge into MCI.
std::optional<CanonicalDx> normalize_diagnosis(Dx raw);

struct VisitRecord {
  std::string subject_id;
  std::string scan_id;
  std::string acquisition_date;  // ISO-8601 (lexicographically ordered)
  Dx diagnosis = Dx::CN;
  std::string volume_path;
};

enum class Visit953Decision { AD, NonAD, Excluded };

struct Visit953Result {
  Visit953Decision decision = Visit953Decision::Excluded;
  std::string scan_id;   // chosen scan; empty when excluded
  std::string reason;
  bool ad_reversal_flag = false;  // AD followed by a later non-AD code
};

// Binary converter labeling over one subject's visits:
//   - any AD visit            -> AD, using the latest AD-labeled scan
//   - else CN-origin subject  -> NonAD, using the earliest CN-labeled scan
//   - else                    -> excluded (pure-MCI trajectory)
// Visits are sorted by date internally; equal dates keep the earlier entry.
Visit953Result label_visit953(const std::vector<VisitRecord>& visits);

// Ternary labeling: every retained scan of the subject carries the
// diagnosis of the final recorded (canonical) visit.
CanonicalDx last_visit_label(const std::vector<VisitRecord>& visits);

enum class Labeling { Visit953, Last };

Labeling parse_labeling(const std::string& name);
std::string to_string(Labeling l);

struct LabeledSample {
  std::string subject_id;
  std::string scan_id;
  std::string acquisition_date;
  std::string volume_path;
  int label = 0;  // index into class_names
};

struct LabelingOutcome {
  std::vector<LabeledSample> samples;
  std::vector<std::string> class_names;   // {NonAD,AD} or {CN,MCI,AD}
  std::vector<std::string> audit_lines;   // one JSON record per subject
  int positive_class = 0;                 // index of AD
};

LabelingOutcome apply_labeling(const std::vector<VisitRecord>& visits,
                               Labeling strategy);

enum class Selection { All, First, FirstWithTrain };

Selection parse_selection(const std::string& name);
std::string to_string(Selection s);

// Keep only each subject's earliest scan.
std::vector<LabeledSample> first_scan_per_subject(std::vector<LabeledSample> samples);

struct SplitPlan {
  int k = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::string>> fold_subjects;  // disjoint, covering
};

// Subject-level stratified k-fold: per-fold class counts deviate from the
// perfect proportion by at most one subject; deterministic for a fixed seed.
SplitPlan stratified_subject_kfold(
    const std::vector<std::pair<std::string, int>>& subject_labels, int k,
    std::uint64_t seed);

struct FoldSplit {
  std::vector<LabeledSample> train, val, test;
};

// Fold f is the test fold, fold (f+1) mod k validation, the rest training;
// the selection strategy is applied afterwards.
FoldSplit make_fold_split(const LabelingOutcome& labeled, const SplitPlan& plan,
                          int fold, Selection sel);

// w_c = N / (C * n_c)
std::vector<double> class_weights(const std::vector<std::size_t>& counts);

// ---- manifest CSV ----
// header: subject_id,scan_id,acquisition_date,diagnosis,volume_path

std::vector<VisitRecord> load_manifest(const std::string& path);
void save_manifest(const std::vector<VisitRecord>& visits, const std::string& path);
void write_audit_log(const std::vector<std::string>& lines, const std::string& path);

// Visits grouped per subject, sorted by (date, scan_id).
std::map<std::string, std::vector<VisitRecord>> group_by_subject(
    const std::vector<VisitRecord>& visits);

}  // namespace adbench::cohort
