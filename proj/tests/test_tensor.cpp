#include <doctest.h>

#include <cmath>

#include "adbench/gradcheck.hpp"
#include "adbench/nn.hpp"
#include "adbench/tensor.hpp"

using namespace adbench;

namespace {

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0, bool grad = true) {
  Tensor<T> t(std::move(shape), grad);
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

template <typename T>
std::vector<T> sign_coeffs(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::vector<T> c(n);
  std::uniform_int_distribution<int> bit(0, 1);
  for (auto& v : c) v = bit(rng) ? T(1) : T(-1);
  return c;
}

// FD-checks one op at both precisions: 1e-5 relative at 64 bit, 1e-3 at 32.
template <typename T>
double op_max_rel_err(const std::function<Tensor<T>(Tape<T>&)>& loss,
                      const std::vector<nn::NamedParam<T>>& blocks) {
  GradCheckOptions opts;
  opts.max_coords_per_block = 10;
  return finite_difference_check<T>(loss, blocks, opts).max_rel_err;
}

}  // namespace

TEST_CASE("conv2d identity kernel") {
  Tape<float> tape;
  Rng rng = make_rng(7);
  Tensor<float> x = randn<float>({2, 3, 5, 5}, rng, 1.0, false);
  // 1x1 identity: kernel[f][c] = (f==c)
  Tensor<float> k({3, 3, 1, 1});
  for (std::size_t f = 0; f < 3; ++f) k.data()[f * 3 + f] = 1.0f;
  Tensor<float> y = tape.conv2d(x, k, {}, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));
}

TEST_CASE("conv2d all-ones 3x3 kernel sums the window") {
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> k = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  Tensor<float> y = tape.conv2d(x, k, {}, 1, 0);
  REQUIRE(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == doctest::Approx(9.0f));
}

TEST_CASE("conv2d output geometry and shape errors") {
  Tape<float> tape;
  Rng rng = make_rng(3);
  Tensor<float> x = randn<float>({1, 2, 7, 9}, rng);
  Tensor<float> k = randn<float>({4, 2, 3, 3}, rng);
  Tensor<float> y = tape.conv2d(x, k, {}, 2, 1);
  CHECK(y.shape() == Shape{1, 4, 4, 5});  // floor((7+2-3)/2)+1, floor((9+2-3)/2)+1

  Tensor<float> bad_channels = randn<float>({1, 3, 7, 9}, rng);
  CHECK_THROWS_WITH_AS(tape.conv2d(bad_channels, k, {}, 1, 0),
                       doctest::Contains("channel"), ShapeError);
  Tensor<float> tiny = randn<float>({1, 2, 2, 2}, rng);
  CHECK_THROWS_AS(tape.conv2d(tiny, k, {}, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradient matches central finite differences") {
  Rng rng = make_rng(11);
  Tensor<double> x = randn<double>({1, 2, 5, 5}, rng);
  Tensor<double> k = randn<double>({3, 2, 3, 3}, rng);
  Tensor<double> b = randn<double>({3}, rng);
  auto coeffs = sign_coeffs<double>(1 * 3 * 5 * 5, 21);
  auto loss = [&](Tape<double>& tape) {
    return tape.reduce_weighted_sum(tape.conv2d(x, k, b, 1, 1), coeffs);
  };
  CHECK(op_max_rel_err<double>(loss, {{"x", x}, {"k", k}, {"b", b}}) < 1e-5);

  // 32-bit path stays within 1e-3 relative
  Rng rng32 = make_rng(11);
  Tensor<float> xf = randn<float>({1, 2, 5, 5}, rng32);
  Tensor<float> kf = randn<float>({3, 2, 3, 3}, rng32);
  auto coeffs32 = sign_coeffs<float>(1 * 3 * 2 * 2, 22);
  auto loss32 = [&](Tape<float>& tape) {
    return tape.reduce_weighted_sum(tape.conv2d(xf, kf, {}, 2, 0), coeffs32);
  };
  CHECK(op_max_rel_err<float>(loss32, {{"x", xf}, {"k", kf}}) < 1e-3);
}

TEST_CASE("primitive gradients match finite differences at 64 bit") {
  Rng rng = make_rng(17);

  SUBCASE("matmul") {
    Tensor<double> a = randn<double>({4, 3}, rng);
    Tensor<double> b = randn<double>({3, 5}, rng);
    auto c = sign_coeffs<double>(20, 1);
    auto loss = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.matmul(a, b), c);
    };
    CHECK(op_max_rel_err<double>(loss, {{"a", a}, {"b", b}}) < 1e-5);
  }
  SUBCASE("bmm with and without transpose") {
    Tensor<double> a = randn<double>({2, 3, 4}, rng);
    Tensor<double> b = randn<double>({2, 4, 3}, rng);
    auto c = sign_coeffs<double>(2 * 3 * 3, 2);
    auto loss = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.bmm(a, b), c);
    };
    CHECK(op_max_rel_err<double>(loss, {{"a", a}, {"b", b}}) < 1e-5);
    Tensor<double> bt = randn<double>({2, 3, 4}, rng);
    auto loss_t = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.bmm(a, bt, true), c);
    };
    CHECK(op_max_rel_err<double>(loss_t, {{"a", a}, {"bt", bt}}) < 1e-5);
  }
  SUBCASE("relu away from the kink") {
    Tensor<double> x = randn<double>({40}, rng);
    for (auto& v : x.values())
      if (std::abs(v) < 0.05) v += 0.1;  // keep FD probes off the kink
    auto c = sign_coeffs<double>(40, 3);
    auto loss = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.relu(x), c);
    };
    CHECK(op_max_rel_err<double>(loss, {{"x", x}}) < 1e-5);
  }
  SUBCASE("softmax") {
    Tensor<double> x = randn<double>({3, 7}, rng);
    auto c = sign_coeffs<double>(21, 4);
    auto loss = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.softmax(x), c);
    };
    CHECK(op_max_rel_err<double>(loss, {{"x", x}}) < 1e-5);
  }
  SUBCASE("pooling") {
    Tensor<double> x = randn<double>({2, 2, 6, 6}, rng);
    auto c = sign_coeffs<double>(2 * 2 * 3 * 3, 5);
    auto loss_max = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.max_pool2d(x, 2, 2), c);
    };
    CHECK(op_max_rel_err<double>(loss_max, {{"x", x}}) < 1e-5);
    auto loss_avg = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.avg_pool2d(x, 2, 2), c);
    };
    CHECK(op_max_rel_err<double>(loss_avg, {{"x", x}}) < 1e-5);
    auto c2 = sign_coeffs<double>(2 * 2, 6);
    auto loss_gap = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.global_avg_pool(x), c2);
    };
    CHECK(op_max_rel_err<double>(loss_gap, {{"x", x}}) < 1e-5);
  }
  SUBCASE("batch norm, train and eval modes") {
    Tensor<double> x = randn<double>({3, 2, 4, 4}, rng);
    Tensor<double> gamma = Tensor<double>::full({2}, 1.0, true);
    Tensor<double> beta = Tensor<double>::zeros({2}, true);
    gamma.data()[1] = 1.5;
    beta.data()[0] = 0.2;
    auto c = sign_coeffs<double>(3 * 2 * 4 * 4, 7);
    BatchNormState<double> state(2);
    auto loss_train = [&](Tape<double>& t) {
      BatchNormState<double> local = state;  // keep the check deterministic
      return t.reduce_weighted_sum(
          t.batch_norm2d(x, gamma, beta, local, true), c);
    };
    CHECK(op_max_rel_err<double>(loss_train,
                                 {{"x", x}, {"gamma", gamma}, {"beta", beta}}) < 1e-5);
    state.running_mean = {0.1, -0.2};
    state.running_var = {1.3, 0.8};
    auto loss_eval = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(
          t.batch_norm2d(x, gamma, beta, state, false), c);
    };
    CHECK(op_max_rel_err<double>(loss_eval,
                                 {{"x", x}, {"gamma", gamma}, {"beta", beta}}) < 1e-5);
  }
  SUBCASE("layer norm") {
    Tensor<double> x = randn<double>({4, 6}, rng);
    Tensor<double> gamma = Tensor<double>::full({6}, 1.0, true);
    Tensor<double> beta = Tensor<double>::zeros({6}, true);
    auto c = sign_coeffs<double>(24, 8);
    auto loss = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.layer_norm(x, gamma, beta), c);
    };
    CHECK(op_max_rel_err<double>(loss, {{"x", x}, {"gamma", gamma}, {"beta", beta}}) <
          1e-5);
  }
  SUBCASE("structural ops") {
    Tensor<double> a = randn<double>({2, 3, 4}, rng);
    Tensor<double> b = randn<double>({2, 2, 4}, rng);
    auto c = sign_coeffs<double>(2 * 5 * 4, 9);
    auto loss_cat = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.concat({a, b}, 1), c);
    };
    CHECK(op_max_rel_err<double>(loss_cat, {{"a", a}, {"b", b}}) < 1e-5);
    auto c2 = sign_coeffs<double>(2 * 4, 10);
    auto loss_mean = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(t.mean_tokens(a), c2);
    };
    CHECK(op_max_rel_err<double>(loss_mean, {{"a", a}}) < 1e-5);
    auto c3 = sign_coeffs<double>(2 * 3 * 4, 11);
    auto loss_heads = [&](Tape<double>& t) {
      return t.reduce_weighted_sum(
          t.merge_heads(t.split_heads(a, 2), 2), c3);
    };
    CHECK(op_max_rel_err<double>(loss_heads, {{"a", a}}) < 1e-5);
  }
}

TEST_CASE("relu and softmax values") {
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::from({3}, {-1.0f, 0.0f, 2.0f}, true);
  Tensor<float> y = tape.relu(x);
  CHECK(y.data()[0] == 0.0f);
  CHECK(y.data()[1] == 0.0f);
  CHECK(y.data()[2] == 2.0f);

  // subgradient at 0 is 0
  Tensor<float> s = tape.reduce_weighted_sum(y, {1.0f, 1.0f, 1.0f});
  tape.backward(s);
  CHECK(x.grad()[0] == 0.0f);
  CHECK(x.grad()[1] == 0.0f);
  CHECK(x.grad()[2] == 1.0f);

  Tensor<float> c = Tensor<float>::full({2, 5}, 3.25f);
  Tape<float> t2;
  Tensor<float> sm = t2.softmax(c);
  for (std::size_t i = 0; i < sm.size(); ++i)
    CHECK(sm.data()[i] == doctest::Approx(0.2f).epsilon(1e-6));
}

TEST_CASE("softmax rows sum to one") {
  Rng rng = make_rng(23);
  Tape<float> tape;
  Tensor<float> x = randn<float>({17, 9}, rng, 3.0, false);
  Tensor<float> y = tape.softmax(x);
  for (std::size_t r = 0; r < 17; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 9; ++c) sum += y.data()[r * 9 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm output has zero mean and unit variance per row") {
  Rng rng = make_rng(29);
  Tape<float> tape;
  Tensor<float> x = randn<float>({5, 32}, rng, 2.0, false);
  Tensor<float> gamma = Tensor<float>::full({32}, 1.0f);
  Tensor<float> beta = Tensor<float>::zeros({32});
  Tensor<float> y = tape.layer_norm(x, gamma, beta);
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 32; ++c) mean += y.data()[r * 32 + c];
    mean /= 32;
    for (std::size_t c = 0; c < 32; ++c) {
      const double d = y.data()[r * 32 + c] - mean;
      var += d * d;
    }
    var /= 32;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("dropout modes") {
  Rng rng = make_rng(31);
  Tensor<float> x = randn<float>({1000}, rng, 1.0, false);

  // eval mode is the identity (same storage, bit-identical)
  Tape<float> tape;
  Rng drop_rng = make_rng(5);
  Tensor<float> eval_out = tape.dropout(x, 0.5, false, drop_rng);
  CHECK(eval_out.same_storage(x));

  // train mode drops roughly the configured fraction and rescales the rest
  Tensor<float> train_out = tape.dropout(x, 0.5, true, drop_rng);
  std::size_t zeros = 0;
  for (std::size_t i = 0; i < train_out.size(); ++i) {
    if (train_out.data()[i] == 0.0f)
      ++zeros;
    else
      CHECK(train_out.data()[i] == doctest::Approx(x.data()[i] * 2.0f));
  }
  CHECK(zeros > 400);
  CHECK(zeros < 600);

  // deterministic under an identical seed
  Rng r1 = make_rng(42), r2 = make_rng(42);
  Tensor<float> a = tape.dropout(x, 0.3, true, r1);
  Tensor<float> b = tape.dropout(x, 0.3, true, r2);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("multi-head attention: singleton softmax and row normalization") {
  Rng rng = make_rng(37);
  nn::MultiHeadSelfAttention<float> attn(8, 2, rng);

  SUBCASE("L = 1: attention weight is exactly 1, output is wo(wv(x))") {
    Tape<float> tape;
    Tensor<float> token = randn<float>({1, 1, 8}, rng, 1.0, false);
    Tensor<float> weights;
    Tensor<float> out = attn.forward(tape, token, &weights);
    REQUIRE(weights.shape() == Shape{2, 1, 1});
    CHECK(weights.data()[0] == 1.0f);
    CHECK(weights.data()[1] == 1.0f);

    Tensor<float> v = attn.wv.forward(tape, token.reshaped({1, 8}));
    Tensor<float> expect = attn.wo.forward(tape, v);
    REQUIRE(out.size() == expect.size());
    for (std::size_t i = 0; i < out.size(); ++i)
      CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-5));
  }

  SUBCASE("attention rows sum to 1 within 1e-6") {
    Tape<float> tape;
    Tensor<float> tokens = randn<float>({3, 5, 8}, rng, 2.0, false);
    Tensor<float> weights;
    attn.forward(tape, tokens, &weights);
    REQUIRE(weights.shape() == Shape{6, 5, 5});
    for (std::size_t b = 0; b < 6; ++b)
      for (std::size_t r = 0; r < 5; ++r) {
        double sum = 0;
        for (std::size_t c = 0; c < 5; ++c)
          sum += weights.data()[(b * 5 + r) * 5 + c];
        CHECK(std::abs(sum - 1.0) < 1e-6);
      }
  }

  SUBCASE("permutation equivariance without positional encodings") {
    Tape<float> tape;
    Tensor<float> tokens = randn<float>({1, 6, 8}, rng, 1.0, false);
    Tensor<float> out = attn.forward(tape, tokens);

    const std::vector<std::size_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor<float> permuted({1, 6, 8});
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        permuted.data()[i * 8 + j] = tokens.data()[perm[i] * 8 + j];
    Tensor<float> out_p = attn.forward(tape, permuted);

    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        CHECK(out_p.data()[i * 8 + j] ==
              doctest::Approx(out.data()[perm[i] * 8 + j]).epsilon(1e-4));
  }

  SUBCASE("token dim must divide head count") {
    Rng r = make_rng(1);
    CHECK_THROWS_AS(nn::MultiHeadSelfAttention<float>(10, 4, r), ConfigError);
  }
}

TEST_CASE("attention gradient matches finite differences") {
  Rng rng = make_rng(41);
  nn::MultiHeadSelfAttention<double> attn(8, 2, rng);
  Tensor<double> tokens = randn<double>({2, 3, 8}, rng);
  auto coeffs = sign_coeffs<double>(2 * 3 * 8, 12);
  auto loss = [&](Tape<double>& t) {
    return t.reduce_weighted_sum(attn.forward(t, tokens), coeffs);
  };
  std::vector<nn::NamedParam<double>> blocks = {{"tokens", tokens}};
  nn::ParamCollector<double> pc;
  attn.collect("attn", pc);
  for (auto& p : pc.params) blocks.push_back(p);
  GradCheckOptions opts;
  opts.max_coords_per_block = 6;
  const auto report = finite_difference_check<double>(loss, blocks, opts);
  CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("weighted cross entropy") {
  SUBCASE("perfect prediction drives the loss to zero") {
    Tape<float> tape;
    Tensor<float> logits = Tensor<float>::from({1, 2}, {30.0f, -30.0f}, true);
    Tensor<float> loss = tape.weighted_cross_entropy(logits, {0}, {1.0, 1.0});
    CHECK(loss.item() == doctest::Approx(0.0f).epsilon(1e-6));
  }

  SUBCASE("uniform weights reduce to the plain mean") {
    Rng rng = make_rng(43);
    Tape<float> tape;
    Tensor<float> logits = randn<float>({5, 3}, rng, 1.0, false);
    const std::vector<int> targets = {0, 2, 1, 1, 0};
    Tensor<float> a = tape.weighted_cross_entropy(logits, targets, {1.0, 1.0, 1.0});
    Tensor<float> b = tape.weighted_cross_entropy(logits, targets, {2.5, 2.5, 2.5});
    CHECK(a.item() == doctest::Approx(b.item()).epsilon(1e-6));

    // plain mean oracle
    double expect = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      double mx = logits.data()[i * 3];
      for (std::size_t j = 1; j < 3; ++j)
        mx = std::max(mx, static_cast<double>(logits.data()[i * 3 + j]));
      double z = 0;
      for (std::size_t j = 0; j < 3; ++j)
        z += std::exp(logits.data()[i * 3 + j] - mx);
      expect += std::log(z) + mx - logits.data()[i * 3 + targets[i]];
    }
    expect /= 5;
    CHECK(a.item() == doctest::Approx(expect).epsilon(1e-5));
  }

  SUBCASE("single sample is weight-invariant; two samples shift per closed form") {
    Tape<float> tape;
    Tensor<float> one = Tensor<float>::from({1, 2}, {0.3f, -0.4f});
    Tensor<float> l1 = tape.weighted_cross_entropy(one, {1}, {1.0, 1.0});
    Tensor<float> l2 = tape.weighted_cross_entropy(one, {1}, {1.0, 2.0});
    CHECK(l1.item() == doctest::Approx(l2.item()).epsilon(1e-6));

    Tensor<float> two = Tensor<float>::from({2, 2}, {0.3f, -0.4f, -1.0f, 0.5f});
    auto ce = [&](std::size_t row) {
      const double a = two.data()[row * 2], b = two.data()[row * 2 + 1];
      const double mx = std::max(a, b);
      const double z = std::exp(a - mx) + std::exp(b - mx);
      const double target = row == 0 ? a : b;  // targets {0, 1}
      return std::log(z) + mx - target;
    };
    // closed-form weighted mean with w0 = 2, w1 = 1
    Tensor<float> weighted =
        tape.weighted_cross_entropy(two, {0, 1}, {2.0, 1.0});
    const double expect = (2.0 * ce(0) + 1.0 * ce(1)) / 3.0;
    CHECK(weighted.item() == doctest::Approx(expect).epsilon(1e-5));
  }

  SUBCASE("rejects bad inputs") {
    Tape<float> tape;
    Tensor<float> logits = Tensor<float>::from({1, 2}, {0.1f, 0.2f});
    CHECK_THROWS_AS(tape.weighted_cross_entropy(logits, {0}, {0.0, 1.0}),
                    ConfigError);
    CHECK_THROWS_AS(tape.weighted_cross_entropy(logits, {0}, {-1.0, 1.0}),
                    ConfigError);
    Tensor<float> inf_logits =
        Tensor<float>::from({1, 2}, {std::numeric_limits<float>::infinity(), 0.0f});
    CHECK_THROWS_AS(tape.weighted_cross_entropy(inf_logits, {0}, {1.0, 1.0}),
                    NumericError);
    CHECK_THROWS_AS(tape.weighted_cross_entropy(logits, {5}, {1.0, 1.0}),
                    ShapeError);
  }

  SUBCASE("gradient matches finite differences") {
    Rng rng = make_rng(47);
    Tensor<double> logits = randn<double>({4, 3}, rng);
    const std::vector<int> targets = {2, 0, 1, 2};
    const std::vector<double> weights = {1.0, 2.0, 0.5};
    auto loss = [&](Tape<double>& t) {
      return t.weighted_cross_entropy(logits, targets, weights);
    };
    CHECK(op_max_rel_err<double>(loss, {{"logits", logits}}) < 1e-6);
  }
}

TEST_CASE("gradients accumulate additively across consumers") {
  // y = x + x: dy/dx = 2 through two add inputs
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::from({3}, {1.0f, 2.0f, 3.0f}, true);
  Tensor<float> y = tape.add(x, x);
  Tensor<float> s = tape.reduce_weighted_sum(y, {1.0f, 1.0f, 1.0f});
  tape.backward(s);
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == 2.0f);
}

TEST_CASE("backward refuses misuse") {
  Tape<float> tape;
  Tensor<float> x = Tensor<float>::from({2}, {1.0f, 2.0f}, true);
  Tensor<float> y = tape.scale(x, 2.0f);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);  // not scalar
  Tensor<float> s = tape.reduce_weighted_sum(y, {1.0f, 1.0f});
  tape.backward(s);
  CHECK_THROWS_AS(tape.backward(s), Error);  // double backward
  tape.clear();
  CHECK(tape.node_count() == 0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor<float>({0, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>::from({2, 2}, {1.0f}), ShapeError);
  Tensor<float> t({2, 3}, true);
  CHECK(t.size() == 6);
  CHECK(t.grad_values().size() == t.values().size());
  Tensor<float> v = t.reshaped({3, 2});
  CHECK(v.same_storage(t));
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
}
