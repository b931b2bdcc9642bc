#include <doctest.h>

#include <cmath>

#include "adbench/adam.hpp"
#include "adbench/gradcheck.hpp"
#include "adbench/models.hpp"
#include "adbench/nn.hpp"

using namespace adbench;

namespace {

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor<T> t(std::move(shape), grad);
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

}  // namespace

TEST_CASE("linear layer gradcheck at 64 bit is below 1e-6") {
  Rng rng = make_rng(101);
  nn::Linear<double> fc(6, 4, rng);
  Tensor<double> x = randn<double>({3, 6}, rng);
  const std::vector<int> targets = {0, 3, 1};
  auto loss = [&](Tape<double>& t) {
    return t.weighted_cross_entropy(fc.forward(t, x), targets,
                                    {1.0, 1.0, 1.0, 1.0});
  };
  nn::ParamCollector<double> pc;
  fc.collect("fc", pc);
  pc.params.push_back({"x", x});
  GradCheckOptions opts;
  opts.max_coords_per_block = 12;
  const auto report = finite_difference_check<double>(loss, pc.params, opts);
  CHECK(report.max_rel_err < 1e-6);
  CHECK(report.pass(1e-6));
  CHECK(report.blocks.size() == 3);
}

TEST_CASE("zero input to a bias-free linear layer has exactly zero weight gradient") {
  Rng rng = make_rng(103);
  nn::Linear<float> fc(5, 3, rng, /*bias=*/false);
  Tensor<float> x = Tensor<float>::zeros({2, 5});
  Tape<float> tape;
  Tensor<float> loss = tape.weighted_cross_entropy(fc.forward(tape, x), {0, 2},
                                                   {1.0, 1.0, 1.0});
  fc.w.zero_grad();
  tape.backward(loss);
  for (std::size_t i = 0; i < fc.w.size(); ++i) CHECK(fc.w.grad()[i] == 0.0f);
}

TEST_CASE("non-deterministic forward aborts the check") {
  Rng rng = make_rng(107);
  Tensor<double> x = randn<double>({4}, rng);
  int calls = 0;
  auto loss = [&](Tape<double>& t) -> Tensor<double> {
    ++calls;  // drifting forward: every evaluation differs
    Tensor<double> shifted = t.scale(x, 1.0 + 0.01 * calls);
    return t.reduce_weighted_sum(shifted, {1.0, 1.0, 1.0, 1.0});
  };
  CHECK_THROWS_WITH_AS(
      finite_difference_check<double>(loss, {{"x", x}}),
      doctest::Contains("non-deterministic"), Error);
}

TEST_CASE("reduced-width pruned ResNet gradcheck passes at 64 bit") {
  models::ModelConfig cfg;
  cfg.kind = models::ModelKind::PrunedResNet;
  cfg.num_classes = 2;
  cfg.slices = 16;
  cfg.dropout = 0.0;  // deterministic forward
  cfg.width_mult = 0.25;
  cfg.init_seed = 5;
  auto model = models::build_model<double>(cfg);

  Rng rng = make_rng(109);
  models::Batch<double> batch;
  batch.axial = randn<double>({4, 16, 16, 16}, rng, 1.0, false);
  batch.labels = {0, 1, 1, 0};

  auto loss = [&](Tape<double>& t) {
    return t.weighted_cross_entropy(model->forward(t, batch, true), batch.labels,
                                    {1.0, 1.0});
  };
  GradCheckOptions opts;
  opts.max_coords_per_block = 3;
  const auto report =
      finite_difference_check<double>(loss, model->parameters(), opts);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("adam step behaviour") {
  SUBCASE("zero gradients leave parameters unchanged") {
    Tensor<float> p = Tensor<float>::from({3}, {0.5f, -1.0f, 2.0f}, true);
    Adam<float> adam({{"p", p}}, {});
    p.zero_grad();
    adam.step();
    CHECK(p.data()[0] == 0.5f);
    CHECK(p.data()[1] == -1.0f);
    CHECK(p.data()[2] == 2.0f);
    CHECK(adam.step_count() == 1);
  }

  SUBCASE("first step from zero with unit gradient moves by -lr/(1+eps)") {
    Tensor<double> p = Tensor<double>::zeros({1}, true);
    AdamConfig cfg;
    cfg.lr = 0.01;
    Adam<double> adam({{"p", p}}, cfg);
    p.grad()[0] = 1.0;
    adam.step();
    // mhat = vhat = 1 after bias correction, so the update is lr/(1+eps)
    CHECK(p.data()[0] == doctest::Approx(-0.01 / (1.0 + 1e-8)).epsilon(1e-12));
  }

  SUBCASE("two steps with constant unit gradient match a hand trace at 64 bit") {
    Tensor<double> p = Tensor<double>::zeros({1}, true);
    AdamConfig cfg;
    cfg.lr = 0.003;
    Adam<double> adam({{"p", p}}, cfg);

    // independent trace of the textbook update
    double m = 0, v = 0, theta = 0;
    for (int t = 1; t <= 2; ++t) {
      const double g = 1.0;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mhat = m / (1.0 - std::pow(0.9, t));
      const double vhat = v / (1.0 - std::pow(0.999, t));
      theta -= cfg.lr * mhat / (std::sqrt(vhat) + 1e-8);

      p.zero_grad();
      p.grad()[0] = 1.0;
      adam.step();
    }
    CHECK(std::abs(p.data()[0] - theta) < 1e-12);
    CHECK(adam.step_count() == 2);
  }

  SUBCASE("non-finite gradient rejects the step without mutating state") {
    Tensor<float> p = Tensor<float>::from({2}, {1.0f, 2.0f}, true);
    Adam<float> adam({{"p", p}}, {});
    p.grad()[0] = std::numeric_limits<float>::quiet_NaN();
    p.grad()[1] = 1.0f;
    CHECK_THROWS_AS(adam.step(), NumericError);
    CHECK(adam.step_count() == 0);
    CHECK(p.data()[0] == 1.0f);
    CHECK(p.data()[1] == 2.0f);
  }
}
