#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "adbench/nn.hpp"
#include "adbench/tensor.hpp"

namespace adbench {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are zero-initialized; the step
// counter advances by exactly one per step. A step with any non-finite
// gradient is rejected before mutating any state.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<nn::NamedParam<T>> params, AdamConfig cfg)
      : cfg_(cfg), params_(std::move(params)) {
    if (!(cfg_.lr > 0)) throw ConfigError(msg("adam: lr must be > 0, got ", cfg_.lr));
    slots_.reserve(params_.size());
    for (auto& p : params_)
      slots_.push_back({std::vector<T>(p.tensor.size(), T(0)),
                        std::vector<T>(p.tensor.size(), T(0))});
  }

  std::uint64_t step_count() const { return t_; }
  const std::vector<nn::NamedParam<T>>& params() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void step() {
    for (auto& p : params_) {
      const T* g = p.tensor.grad();
      for (std::size_t i = 0; i < p.tensor.size(); ++i)
        if (!std::isfinite(static_cast<double>(g[i])))
          throw NumericError(msg("adam: non-finite gradient in '", p.name,
                                 "', step rejected"));
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t s = 0; s < params_.size(); ++s) {
      Tensor<T>& p = params_[s].tensor;
      const T* g = p.grad();
      T* val = p.data();
      std::vector<T>& m = slots_[s].m;
      std::vector<T>& v = slots_[s].v;
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i]);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        val[i] -= static_cast<T>(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

 private:
  struct Slot {
    std::vector<T> m, v;
  };
  AdamConfig cfg_;
  std::vector<nn::NamedParam<T>> params_;
  std::vector<Slot> slots_;
  std::uint64_t t_ = 0;
};

}  // namespace adbench
