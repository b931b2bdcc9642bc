#include <doctest.h>

#include <cmath>

#include "adbench/models.hpp"
#include "adbench/train.hpp"
#include "adbench/volume.hpp"

using namespace adbench;
using namespace adbench::models;

namespace {

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

ModelConfig tiny(ModelKind kind, int classes = 2, int slices = 16) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.num_classes = classes;
  cfg.slices = slices;
  cfg.dropout = 0.5;
  cfg.width_mult = 0.25;
  cfg.init_seed = 3;
  return cfg;
}

void check_probability_rows(const Tensor<float>& probs) {
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) {
      const float p = probs.data()[i * c + j];
      CHECK(p > 0.0f);
      CHECK(p < 1.0f);
      sum += p;
    }
    CHECK(std::abs(sum - 1.0) < 1e-6);
  }
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig cfg = tiny(ModelKind::InceptionGrid);
  cfg.slices = 77;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny(ModelKind::PrunedResNet);
  cfg.slices = 77;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny(ModelKind::PlaneTransformer, 2, 77);
  CHECK_NOTHROW(cfg.validate());
  cfg.num_classes = 5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = tiny(ModelKind::PlaneTransformer);
  cfg.token_dim = 62;  // not divisible by 4 heads
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("model config JSON round-trip") {
  ModelConfig cfg = tiny(ModelKind::PlaneTransformer, 3, 77);
  cfg.token_dim = 32;
  cfg.heads = 2;
  const ModelConfig back = model_config_from_json(model_config_to_json(cfg));
  CHECK(back.kind == cfg.kind);
  CHECK(back.num_classes == cfg.num_classes);
  CHECK(back.slices == cfg.slices);
  CHECK(back.token_dim == cfg.token_dim);
  CHECK(back.width_mult == cfg.width_mult);
}

TEST_CASE("inception montage model") {
  auto model = build_model<float>(tiny(ModelKind::InceptionGrid));
  Rng rng = make_rng(7);

  Batch<float> batch;
  batch.montage = randn<float>({3, 1, 64, 64}, rng);

  SUBCASE("probability rows are valid distributions") {
    check_probability_rows(model->predict_probs(batch));
  }

  SUBCASE("eval-mode forward is deterministic") {
    const Tensor<float> a = model->predict_probs(batch);
    const Tensor<float> b = model->predict_probs(batch);
    CHECK(a.values() == b.values());
  }

  SUBCASE("wrong input shape is rejected") {
    Batch<float> bad;
    bad.axial = randn<float>({2, 16, 8, 8}, rng);
    Tape<float> tape;
    CHECK_THROWS_AS(model->forward(tape, bad, false), ShapeError);
  }
}

TEST_CASE("plane transformer token contract") {
  SUBCASE("full mode on the uniform grid yields 333 tokens of width 64") {
    ModelConfig cfg = tiny(ModelKind::PlaneTransformer, 2, 77);
    cfg.width_mult = 0.125;
    auto model = build_model<float>(cfg);
    CHECK(model->penultimate_dim() == 64);

    vol::Volume v({128, 128, 77}, {2, 2, 2});
    Rng rng = make_rng(11);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& x : v.voxels) x = d(rng);
    train::SampleViews views =
        train::make_views(v, InputKind::AllPlanes, 77, {128, 128, 77});
    CHECK(views.axial.size() == 77);
    CHECK(views.coronal.size() == 128);
    CHECK(views.sagittal.size() == 128);

    Batch<float> batch = train::pack_batch(InputKind::AllPlanes, {views}, {0});
    const Tensor<float> probs = model->predict_probs(batch);
    CHECK(model->last_token_count() == 333);
    check_probability_rows(probs);
  }

  SUBCASE("16-slice mode yields 16 tokens") {
    ModelConfig cfg = tiny(ModelKind::PlaneTransformer, 2, 16);
    cfg.width_mult = 0.125;
    auto model = build_model<float>(cfg);
    Rng rng = make_rng(13);
    Batch<float> batch;
    batch.axial = randn<float>({2, 16, 16, 16}, rng);
    model->predict_probs(batch);
    CHECK(model->last_token_count() == 16);
  }

  SUBCASE("wrong slice count is rejected in 16-slice mode") {
    auto model = build_model<float>(tiny(ModelKind::PlaneTransformer, 2, 16));
    Rng rng = make_rng(17);
    Batch<float> batch;
    batch.axial = randn<float>({1, 12, 16, 16}, rng);
    Tape<float> tape;
    CHECK_THROWS_AS(model->forward(tape, batch, false), ShapeError);
  }
}

TEST_CASE("pruned resnet contract") {
  SUBCASE("penultimate feature vector has length 16") {
    auto model = build_model<float>(tiny(ModelKind::PrunedResNet));
    CHECK(model->penultimate_dim() == 16);
  }

  SUBCASE("default parameter count sits in the 718k +- 10% window") {
    ModelConfig cfg;
    cfg.kind = ModelKind::PrunedResNet;
    cfg.num_classes = 2;
    const std::size_t count = build_model<float>(cfg)->count_parameters();
    CHECK(count >= 646000);
    CHECK(count <= 790000);
  }

  SUBCASE("default pruned resnet is lighter than transformer and inception") {
    ModelConfig presnet;
    presnet.kind = ModelKind::PrunedResNet;
    ModelConfig transformer;
    transformer.kind = ModelKind::PlaneTransformer;
    transformer.slices = 77;
    ModelConfig inception;
    inception.kind = ModelKind::InceptionGrid;
    inception.dropout = 0.6;
    const auto p = build_model<float>(presnet)->count_parameters();
    const auto t = build_model<float>(transformer)->count_parameters();
    const auto i = build_model<float>(inception)->count_parameters();
    CHECK(p < t);
    CHECK(p < i);
  }

  SUBCASE("slice-count mismatch at forward is rejected") {
    auto model = build_model<float>(tiny(ModelKind::PrunedResNet));
    Rng rng = make_rng(19);
    Batch<float> batch;
    batch.axial = randn<float>({1, 8, 16, 16}, rng);
    Tape<float> tape;
    CHECK_THROWS_AS(model->forward(tape, batch, false), ShapeError);
  }
}

TEST_CASE("count_parameters") {
  SUBCASE("a 16 -> 2 linear layer with bias has 34 scalars") {
    Rng rng = make_rng(1);
    nn::Linear<float> fc(16, 2, rng);
    nn::ParamCollector<float> pc;
    fc.collect("fc", pc);
    CHECK(nn::count_scalars(pc.params) == 34);
  }

  SUBCASE("two builds of the same config count identically") {
    const ModelConfig cfg = tiny(ModelKind::InceptionGrid);
    CHECK(build_model<float>(cfg)->count_parameters() ==
          build_model<float>(cfg)->count_parameters());
  }

  SUBCASE("parameter names are unique") {
    auto model = build_model<float>(tiny(ModelKind::PlaneTransformer, 3, 77));
    std::set<std::string> names;
    for (const auto& [name, count] : model->parameter_table())
      CHECK(names.insert(name).second);
  }
}

TEST_CASE("batch-order equivariance in eval mode") {
  auto model = build_model<float>(tiny(ModelKind::PrunedResNet));
  Rng rng = make_rng(23);
  Tensor<float> stack = randn<float>({4, 16, 16, 16}, rng);

  Batch<float> batch;
  batch.axial = stack;
  const Tensor<float> probs = model->predict_probs(batch);

  // reverse the batch
  Tensor<float> reversed({4, 16, 16, 16});
  const std::size_t per = 16 * 16 * 16;
  for (std::size_t i = 0; i < 4; ++i)
    std::copy(stack.data() + i * per, stack.data() + (i + 1) * per,
              reversed.data() + (3 - i) * per);
  Batch<float> rbatch;
  rbatch.axial = reversed;
  const Tensor<float> rprobs = model->predict_probs(rbatch);

  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      CHECK(probs.data()[i * 2 + c] ==
            doctest::Approx(rprobs.data()[(3 - i) * 2 + c]).epsilon(1e-6));
}

TEST_CASE("identical batch rows produce identical outputs") {
  auto model = build_model<float>(tiny(ModelKind::InceptionGrid));
  Rng rng = make_rng(29);
  Tensor<float> one = randn<float>({1, 1, 64, 64}, rng);
  Tensor<float> repeated({3, 1, 64, 64});
  for (std::size_t i = 0; i < 3; ++i)
    std::copy(one.data(), one.data() + 64 * 64, repeated.data() + i * 64 * 64);
  Batch<float> batch;
  batch.montage = repeated;
  const Tensor<float> probs = model->predict_probs(batch);
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t c = 0; c < 2; ++c)
      CHECK(probs.data()[i * 2 + c] == probs.data()[c]);
}

TEST_CASE("non-finite activations raise an error naming the stage") {
  auto model = build_model<float>(tiny(ModelKind::PrunedResNet));
  Batch<float> batch;
  batch.axial = Tensor<float>::full({1, 16, 16, 16},
                                    std::numeric_limits<float>::quiet_NaN());
  Tape<float> tape;
  CHECK_THROWS_WITH_AS(model->forward(tape, batch, false),
                       doctest::Contains("non-finite"), NumericError);
}
