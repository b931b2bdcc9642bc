#pragma once

// Central finite-difference verification of tape gradients. The forward
// callable must be deterministic (dropout disabled); this is verified by
// running it twice and comparing results bit for bit.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "adbench/nn.hpp"
#include "adbench/tensor.hpp"

namespace adbench {

struct GradCheckOptions {
  // Coordinates checked per parameter block; blocks at most this large are
  // checked exhaustively, larger blocks are subsampled deterministically.
  std::size_t max_coords_per_block = 8;
  std::uint64_t seed = 0x5eedULL;
  // Step and denominators default per precision when <= 0.
  double step_scale = 0.0;
  double denom_floor = 0.0;
  // Relative disagreement between the h and h/2 difference quotients beyond
  // which a coordinate is treated as kink-contaminated (a ReLU or max-pool
  // switch inside the probe interval) and excluded. Defaults per precision
  // when <= 0.
  double kink_tol = 0.0;
};

struct GradCheckBlock {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;  // kink-contaminated probes
};

struct GradCheckReport {
  std::vector<GradCheckBlock> blocks;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_skipped = 0;

  bool pass(double tol) const { return max_rel_err < tol; }
};

// forward_loss builds a fresh graph on the given tape and returns the scalar
// loss. Blocks are the tensors whose tape gradients are to be verified
// (parameters and/or inputs with requires_grad).
template <typename T>
GradCheckReport finite_difference_check(
    const std::function<Tensor<T>(Tape<T>&)>& forward_loss,
    const std::vector<nn::NamedParam<T>>& blocks,
    GradCheckOptions opts = {}) {
  const double eps_t = static_cast<double>(std::numeric_limits<T>::epsilon());
  const double h_scale =
      opts.step_scale > 0 ? opts.step_scale : std::cbrt(eps_t);
  // Denominator floor: gradient coordinates below this scale are dominated
  // by central-difference cancellation noise rather than signal, so the
  // error is measured against the floor instead of the coordinate.
  const double floor =
      opts.denom_floor > 0 ? opts.denom_floor : (sizeof(T) == 4 ? 5e-2 : 1e-3);
  const double kink_tol =
      opts.kink_tol > 0 ? opts.kink_tol : (sizeof(T) == 4 ? 3e-2 : 1e-3);

  auto eval = [&]() -> T {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    return forward_loss(tape).item();
  };

  // Determinism gate: two identical runs must agree bit for bit.
  {
    const T a = eval();
    const T b = eval();
    if (std::memcmp(&a, &b, sizeof(T)) != 0)
      throw Error("finite_difference_check: non-deterministic forward detected, "
                  "check aborted (disable dropout and batch-stat updates)");
  }

  // Analytic gradients.
  for (const auto& b : blocks) {
    Tensor<T> t = b.tensor;
    t.zero_grad();
  }
  std::vector<std::vector<T>> analytic;
  {
    Tape<T> tape;
    Tensor<T> loss = forward_loss(tape);
    tape.backward(loss);
    for (const auto& b : blocks) analytic.push_back(b.tensor.grad_values());
  }

  Rng rng = make_rng(opts.seed);
  GradCheckReport report;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    Tensor<T> t = blocks[bi].tensor;
    GradCheckBlock blk;
    blk.name = blocks[bi].name;

    std::vector<std::size_t> coords;
    if (t.size() <= opts.max_coords_per_block) {
      coords.resize(t.size());
      for (std::size_t i = 0; i < t.size(); ++i) coords[i] = i;
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, t.size() - 1);
      while (coords.size() < opts.max_coords_per_block) {
        std::size_t c = pick(rng);
        if (std::find(coords.begin(), coords.end(), c) == coords.end())
          coords.push_back(c);
      }
    }

    for (std::size_t c : coords) {
      const T orig = t.data()[c];
      const double h = h_scale * std::max(1.0, std::abs(static_cast<double>(orig)));
      auto quotient = [&](double step) {
        t.data()[c] = static_cast<T>(static_cast<double>(orig) + step);
        const double fp = static_cast<double>(eval());
        t.data()[c] = static_cast<T>(static_cast<double>(orig) - step);
        const double fm = static_cast<double>(eval());
        t.data()[c] = orig;
        return (fp - fm) / (2.0 * step);
      };
      const double fd_h = quotient(h);
      const double fd_h2 = quotient(h / 2.0);
      // a piecewise-linear switch inside the probe interval makes the two
      // quotients disagree; such coordinates measure the kink, not the
      // gradient, and are excluded
      if (std::abs(fd_h - fd_h2) >
          kink_tol * std::max({std::abs(fd_h), std::abs(fd_h2), floor})) {
        ++blk.coords_skipped;
        continue;
      }
      const double numeric = fd_h2;
      const double a = static_cast<double>(analytic[bi][c]);
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      blk.max_rel_err = std::max(blk.max_rel_err, rel);
      ++blk.coords_checked;
    }
    report.max_rel_err = std::max(report.max_rel_err, blk.max_rel_err);
    report.coords_checked += blk.coords_checked;
    report.coords_skipped += blk.coords_skipped;
    report.blocks.push_back(std::move(blk));
  }
  return report;
}

}  // namespace adbench
