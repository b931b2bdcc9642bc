#pragma once

// Classification metrics: ROC-AUC (binary exact with midrank ties,
// multiclass macro one-vs-rest), accuracy/sensitivity/specificity, and
// fold aggregation in "mean (std)" form.

#include <string>
#include <vector>

#include "adbench/common.hpp"

namespace adbench::metrics {

// Mann-Whitney formulation: concordant pairs count 1, ties count 1/2,
// normalized by n_pos * n_neg. Both classes must be present.
double roc_auc_binary(const std::vector<double>& positive_scores,
                      const std::vector<int>& labels);

// Unweighted mean of per-class one-vs-rest AUCs over the classes present.
// Absent classes are skipped (recorded in *skipped_classes when given);
// if fewer than two classes are present this is an error.
double roc_auc_multiclass(const std::vector<std::vector<double>>& score_rows,
                          const std::vector<int>& labels,
                          std::vector<int>* skipped_classes = nullptr);

struct ConfusionMetrics {
  double accuracy = 0.0;
  double sensitivity = 0.0;  // recall of the positive class
  double specificity = 0.0;  // recall of the rest
};

// Argmax decision rule; for binary score rows an explicit threshold on the
// positive-class probability may be supplied instead (argmax == 0.5).
ConfusionMetrics confusion_metrics(const std::vector<std::vector<double>>& score_rows,
                                   const std::vector<int>& labels,
                                   int positive_class,
                                   double binary_threshold = -1.0);

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;  // population
};

Aggregate aggregate_folds(const std::vector<double>& values);

// Table-style cell: "0.83 (0.02)"
std::string format_mean_std(const Aggregate& a);

}  // namespace adbench::metrics
