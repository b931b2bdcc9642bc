#include "adbench/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

namespace adbench::metrics {

double roc_auc_binary(const std::vector<double>& positive_scores,
                      const std::vector<int>& labels) {
  if (positive_scores.size() != labels.size())
    throw ShapeError(msg("roc_auc: ", positive_scores.size(), " scores vs ",
                         labels.size(), " labels"));
  const std::size_t n = labels.size();
  std::size_t n_pos = 0;
  for (int l : labels) {
    if (l != 0 && l != 1) throw Error(msg("roc_auc: label must be 0/1, got ", l));
    n_pos += static_cast<std::size_t>(l);
  }
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw Error("roc_auc undefined: only one class present");

  // midrank sum of the positives
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return positive_scores[a] < positive_scores[b];
  });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n &&
           positive_scores[order[j + 1]] == positive_scores[order[i]])
      ++j;
    // ranks i+1 .. j+1 share the midrank
    const double midrank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t)
      if (labels[order[t]] == 1) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - static_cast<double>(n_pos) *
                                      (static_cast<double>(n_pos) + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double roc_auc_multiclass(const std::vector<std::vector<double>>& score_rows,
                          const std::vector<int>& labels,
                          std::vector<int>* skipped_classes) {
  if (score_rows.size() != labels.size())
    throw ShapeError("roc_auc_multiclass: score/label count mismatch");
  if (score_rows.empty()) throw Error("roc_auc_multiclass: no samples");
  const std::size_t c = score_rows[0].size();
  std::set<int> present(labels.begin(), labels.end());
  if (present.size() < 2)
    throw Error("roc_auc_multiclass: fewer than two classes present");

  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t cls = 0; cls < c; ++cls) {
    if (!present.count(static_cast<int>(cls))) {
      if (skipped_classes) skipped_classes->push_back(static_cast<int>(cls));
      continue;
    }
    std::vector<double> scores(labels.size());
    std::vector<int> ovr(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (score_rows[i].size() != c)
        throw ShapeError("roc_auc_multiclass: ragged score rows");
      scores[i] = score_rows[i][cls];
      ovr[i] = labels[i] == static_cast<int>(cls) ? 1 : 0;
    }
    sum += roc_auc_binary(scores, ovr);
    ++used;
  }
  return sum / static_cast<double>(used);
}

ConfusionMetrics confusion_metrics(const std::vector<std::vector<double>>& score_rows,
                                   const std::vector<int>& labels,
                                   int positive_class,
                                   double binary_threshold) {
  if (score_rows.size() != labels.size() || score_rows.empty())
    throw ShapeError("confusion_metrics: score/label count mismatch or empty");
  const std::size_t c = score_rows[0].size();
  if (positive_class < 0 || static_cast<std::size_t>(positive_class) >= c)
    throw ConfigError(msg("confusion_metrics: positive class ", positive_class,
                          " out of range for ", c, " classes"));
  if (binary_threshold >= 0.0 && c != 2)
    throw ConfigError("confusion_metrics: explicit threshold requires 2 classes");

  std::size_t correct = 0, tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto& row = score_rows[i];
    int pred;
    if (binary_threshold >= 0.0) {
      pred = row[static_cast<std::size_t>(positive_class)] >= binary_threshold
                 ? positive_class
                 : 1 - positive_class;
    } else {
      pred = static_cast<int>(
          std::max_element(row.begin(), row.end()) - row.begin());
    }
    if (pred == labels[i]) ++correct;
    const bool actual_pos = labels[i] == positive_class;
    const bool pred_pos = pred == positive_class;
    if (actual_pos && pred_pos) ++tp;
    if (actual_pos && !pred_pos) ++fn;
    if (!actual_pos && !pred_pos) ++tn;
    if (!actual_pos && pred_pos) ++fp;
  }
  if (tp + fn == 0) throw Error("sensitivity undefined: no positive samples");
  if (tn + fp == 0) throw Error("specificity undefined: no negative samples");

  ConfusionMetrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.sensitivity = static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.specificity = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return m;
}

Aggregate aggregate_folds(const std::vector<double>& values) {
  if (values.empty()) throw Error("aggregate_folds: no values");
  Aggregate a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - a.mean) * (v - a.mean);
  var /= static_cast<double>(values.size());
  a.stddev = std::sqrt(var);
  return a;
}

std::string format_mean_std(const Aggregate& a) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f (%.2f)", a.mean, a.stddev);
  return buf;
}

}  // namespace adbench::metrics
