#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "adbench/metrics.hpp"

using namespace adbench;
using namespace adbench::metrics;

namespace {

// brute-force pairwise concordance oracle, ties count one half
double auc_oracle(const std::vector<double>& scores, const std::vector<int>& labels) {
  double concordant = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < scores.size(); ++i)
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j])
        concordant += 1.0;
      else if (scores[i] == scores[j])
        concordant += 0.5;
    }
  return concordant / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("binary ROC AUC") {
  SUBCASE("perfect separation gives 1.0") {
    CHECK(roc_auc_binary({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  }

  SUBCASE("the hand-computed 3-of-4 case gives 0.75") {
    CHECK(roc_auc_binary({0.8, 0.35, 0.4, 0.1}, {1, 1, 0, 0}) ==
          doctest::Approx(0.75).epsilon(1e-12));
  }

  SUBCASE("all scores equal gives 0.5") {
    CHECK(roc_auc_binary({0.5, 0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0, 0}) ==
          doctest::Approx(0.5).epsilon(1e-12));
  }

  SUBCASE("single-class input is an error") {
    CHECK_THROWS_WITH_AS(roc_auc_binary({0.1, 0.2}, {1, 1}),
                         doctest::Contains("one class"), Error);
  }

  SUBCASE("matches the brute-force oracle on random instances with ties") {
    Rng rng = make_rng(13);
    std::uniform_int_distribution<std::size_t> size_dist(2, 200);
    std::uniform_int_distribution<int> label_dist(0, 1);
    std::uniform_int_distribution<int> score_dist(0, 20);  // forces ties
    for (int trial = 0; trial < 300; ++trial) {
      const std::size_t n = size_dist(rng);
      std::vector<double> scores(n);
      std::vector<int> labels(n);
      bool has0 = false, has1 = false;
      for (std::size_t i = 0; i < n; ++i) {
        scores[i] = score_dist(rng) / 20.0;
        labels[i] = label_dist(rng);
        (labels[i] ? has1 : has0) = true;
      }
      if (!has0 || !has1) continue;
      CHECK(std::abs(roc_auc_binary(scores, labels) - auc_oracle(scores, labels)) <
            1e-12);
    }
  }

  SUBCASE("invariant under strictly increasing transforms") {
    Rng rng = make_rng(17);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<double> scores(60);
    std::vector<int> labels(60);
    for (std::size_t i = 0; i < 60; ++i) {
      scores[i] = d(rng);
      labels[i] = i % 3 == 0;
    }
    const double base = roc_auc_binary(scores, labels);
    std::vector<double> transformed(60);
    for (std::size_t i = 0; i < 60; ++i)
      transformed[i] = std::exp(3.0 * scores[i]) + 7.0;
    CHECK(roc_auc_binary(transformed, labels) == doctest::Approx(base).epsilon(1e-12));
  }

  SUBCASE("AUC(scores) + AUC(-scores) = 1 without ties") {
    Rng rng = make_rng(19);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<double> scores(50), neg(50);
    std::vector<int> labels(50);
    for (std::size_t i = 0; i < 50; ++i) {
      scores[i] = d(rng);
      neg[i] = -scores[i];
      labels[i] = i % 2;
    }
    CHECK(roc_auc_binary(scores, labels) + roc_auc_binary(neg, labels) ==
          doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("multiclass ROC AUC") {
  SUBCASE("perfect three-class prediction gives 1.0") {
    const std::vector<std::vector<double>> rows = {
        {0.9, 0.05, 0.05}, {0.05, 0.9, 0.05}, {0.05, 0.05, 0.9},
        {0.8, 0.1, 0.1},   {0.1, 0.8, 0.1},   {0.1, 0.1, 0.8}};
    CHECK(roc_auc_multiclass(rows, {0, 1, 2, 0, 1, 2}) == doctest::Approx(1.0));
  }

  SUBCASE("uniform scores give 0.5") {
    const std::vector<std::vector<double>> rows(9, {1.0 / 3, 1.0 / 3, 1.0 / 3});
    CHECK(roc_auc_multiclass(rows, {0, 1, 2, 0, 1, 2, 0, 1, 2}) ==
          doctest::Approx(0.5));
  }

  SUBCASE("two-class input agrees with the binary AUC") {
    Rng rng = make_rng(23);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> rows;
    std::vector<double> pos;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
      const double p = d(rng);
      rows.push_back({1.0 - p, p});
      pos.push_back(p);
      labels.push_back(i % 2);
    }
    CHECK(roc_auc_multiclass(rows, labels) ==
          doctest::Approx(roc_auc_binary(pos, labels)).epsilon(1e-12));
  }

  SUBCASE("absent classes are skipped and reported") {
    const std::vector<std::vector<double>> rows = {
        {0.8, 0.1, 0.1}, {0.1, 0.1, 0.8}, {0.7, 0.2, 0.1}, {0.2, 0.2, 0.6}};
    std::vector<int> skipped;
    const double auc = roc_auc_multiclass(rows, {0, 2, 0, 2}, &skipped);
    CHECK(skipped == std::vector<int>{1});
    CHECK(auc == doctest::Approx(1.0));
  }

  SUBCASE("fewer than two classes present is an error") {
    const std::vector<std::vector<double>> rows = {{0.9, 0.1}, {0.8, 0.2}};
    CHECK_THROWS_AS(roc_auc_multiclass(rows, {0, 0}), Error);
  }
}

TEST_CASE("confusion metrics") {
  SUBCASE("perfect predictions score 1.0 everywhere") {
    const std::vector<std::vector<double>> rows = {
        {0.9, 0.1}, {0.2, 0.8}, {0.7, 0.3}, {0.1, 0.9}};
    const auto m = confusion_metrics(rows, {0, 1, 0, 1}, 1);
    CHECK(m.accuracy == 1.0);
    CHECK(m.sensitivity == 1.0);
    CHECK(m.specificity == 1.0);
  }

  SUBCASE("the half-right case scores 0.5 on all three") {
    // predicted [1,1,0,0] vs labels [1,0,1,0]
    const std::vector<std::vector<double>> rows = {
        {0.2, 0.8}, {0.3, 0.7}, {0.9, 0.1}, {0.6, 0.4}};
    const auto m = confusion_metrics(rows, {1, 0, 1, 0}, 1);
    CHECK(m.accuracy == 0.5);
    CHECK(m.sensitivity == 0.5);
    CHECK(m.specificity == 0.5);
  }

  SUBCASE("swapping the positive class swaps sensitivity and specificity") {
    Rng rng = make_rng(29);
    std::uniform_real_distribution<double> d(0.0, 1.0);
    std::vector<std::vector<double>> rows;
    std::vector<int> labels, flipped;
    for (int i = 0; i < 30; ++i) {
      const double p = d(rng);
      rows.push_back({1.0 - p, p});
      labels.push_back(d(rng) < 0.4);
      flipped.push_back(1 - labels.back());
    }
    const auto m = confusion_metrics(rows, labels, 1);
    std::vector<std::vector<double>> swapped_rows;
    for (const auto& r : rows) swapped_rows.push_back({r[1], r[0]});
    const auto s = confusion_metrics(swapped_rows, flipped, 1);
    CHECK(m.sensitivity == doctest::Approx(s.specificity));
    CHECK(m.specificity == doctest::Approx(s.sensitivity));
  }

  SUBCASE("accuracy is invariant to argmax-preserving rescaling") {
    const std::vector<std::vector<double>> rows = {{0.6, 0.4}, {0.3, 0.7}};
    const auto base = confusion_metrics(rows, {0, 1}, 1);
    const std::vector<std::vector<double>> scaled = {{0.55, 0.45}, {0.45, 0.55}};
    const auto same = confusion_metrics(scaled, {0, 1}, 1);
    CHECK(base.accuracy == same.accuracy);
  }

  SUBCASE("three-class argmax with AD positive") {
    const std::vector<std::vector<double>> rows = {
        {0.7, 0.2, 0.1},   // CN correct
        {0.1, 0.2, 0.7},   // AD correct
        {0.1, 0.7, 0.2},   // MCI correct
        {0.5, 0.1, 0.4}};  // AD missed
    const auto m = confusion_metrics(rows, {0, 2, 1, 2}, 2);
    CHECK(m.accuracy == doctest::Approx(0.75));
    CHECK(m.sensitivity == doctest::Approx(0.5));   // one of two AD found
    CHECK(m.specificity == doctest::Approx(1.0));
  }

  SUBCASE("missing positive samples is an error") {
    const std::vector<std::vector<double>> rows = {{0.9, 0.1}, {0.8, 0.2}};
    CHECK_THROWS_WITH_AS(confusion_metrics(rows, {0, 0}, 1),
                         doctest::Contains("sensitivity undefined"), Error);
  }

  SUBCASE("explicit binary threshold") {
    const std::vector<std::vector<double>> rows = {{0.65, 0.35}, {0.55, 0.45}};
    // argmax would call both negative; a 0.3 threshold calls both positive
    const auto argmax = confusion_metrics(rows, {1, 0}, 1);
    CHECK(argmax.sensitivity == 0.0);
    const auto lowered = confusion_metrics(rows, {1, 0}, 1, 0.3);
    CHECK(lowered.sensitivity == 1.0);
    CHECK(lowered.specificity == 0.0);
  }
}

TEST_CASE("fold aggregation") {
  SUBCASE("mean and population std of [0.8, 0.9]") {
    const auto a = aggregate_folds({0.8, 0.9});
    CHECK(a.mean == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(a.stddev == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(format_mean_std(a) == "0.85 (0.05)");
  }

  SUBCASE("a single value has zero spread") {
    const auto a = aggregate_folds({0.73});
    CHECK(format_mean_std(a) == "0.73 (0.00)");
  }

  SUBCASE("constant lists have zero std") {
    const auto a = aggregate_folds({0.6, 0.6, 0.6, 0.6});
    CHECK(a.stddev == 0.0);
  }

  SUBCASE("empty input is an error") {
    CHECK_THROWS_AS(aggregate_folds({}), Error);
  }

  SUBCASE("table-style rendering") {
    CHECK(format_mean_std({0.834, 0.0251}) == "0.83 (0.03)");
  }
}
