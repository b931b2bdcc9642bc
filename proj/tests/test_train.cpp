#include <doctest.h>

#include <filesystem>

#include "adbench/checkpoint.hpp"
#include "adbench/synth.hpp"
#include "adbench/train.hpp"

using namespace adbench;
using namespace adbench::train;
namespace fs = std::filesystem;

namespace {

// small binary cohort on disk, shared across cases in this file
struct CohortFixture {
  fs::path dir;
  cohort::LabelingOutcome labeled;
  cohort::SplitPlan plan;

  explicit CohortFixture(std::size_t subjects = 18, double noise = 0.05,
                         std::uint64_t seed = 5) {
    dir = fs::temp_directory_path() /
          ("adbench_train_" + std::to_string(subjects) + "_" +
           std::to_string(seed));
    if (!fs::exists(dir / "manifest.csv")) {
      synth::CohortSpec spec = synth::fleni_like_spec(/*small=*/true);
      spec.subjects = subjects;
      spec.noise_sigma = noise;
      synth::generate_cohort(spec, seed, dir.string());
    }
    const auto visits = cohort::load_manifest((dir / "manifest.csv").string());
    labeled = cohort::apply_labeling(visits, cohort::Labeling::Visit953);
    std::vector<std::pair<std::string, int>> subjects_labels;
    for (const auto& s : labeled.samples)
      subjects_labels.push_back({s.subject_id, s.label});
    plan = cohort::stratified_subject_kfold(subjects_labels, 3, 11);
  }
};

models::ModelConfig tiny_presnet() {
  models::ModelConfig cfg;
  cfg.kind = models::ModelKind::PrunedResNet;
  cfg.num_classes = 2;
  cfg.slices = 16;
  cfg.dropout = 0.0;
  cfg.width_mult = 0.25;
  cfg.init_seed = 2;
  return cfg;
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.batch_size = 4;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  cfg.seed = 9;
  cfg.augment.enabled = false;
  return cfg;
}

}  // namespace

TEST_CASE("early stopping controller") {
  SUBCASE("a peak at epoch 10 halts at epoch 40 with patience 30") {
    EarlyStopping es{30, 1e-4};
    int stopped_at = 0;
    for (int epoch = 1; epoch <= 100; ++epoch) {
      const double auc = epoch <= 10 ? 0.5 + 0.03 * epoch : 0.8;  // plateau
      es.update(epoch, auc);
      if (es.should_stop(epoch)) {
        stopped_at = epoch;
        break;
      }
    }
    CHECK(stopped_at == 40);
    CHECK(es.best_epoch == 10);
  }

  SUBCASE("strictly improving runs go the distance") {
    EarlyStopping es{30, 1e-4};
    int stopped_at = 0;
    for (int epoch = 1; epoch <= 100; ++epoch) {
      es.update(epoch, 0.5 + 0.004 * epoch);
      if (es.should_stop(epoch)) {
        stopped_at = epoch;
        break;
      }
    }
    CHECK(stopped_at == 0);
    CHECK(es.best_epoch == 100);
  }

  SUBCASE("improvements below min_delta do not reset the counter") {
    EarlyStopping es{5, 1e-4};
    es.update(1, 0.7);
    for (int epoch = 2; epoch <= 6; ++epoch) es.update(epoch, 0.7 + 1e-6);
    CHECK(es.best_epoch == 1);
    CHECK(es.should_stop(6));
  }
}

TEST_CASE("augmentation") {
  Rng rng = make_rng(3);
  SampleViews views;
  for (int i = 0; i < 3; ++i) {
    vol::Slice2D s(12, 12);
    std::uniform_real_distribution<float> d(0.0f, 1.0f);
    for (auto& p : s.pix) p = d(rng);
    views.axial.push_back(std::move(s));
  }

  SUBCASE("disabled or zero-magnitude settings are the identity") {
    AugmentConfig off;
    off.enabled = false;
    SampleViews copy = views;
    augment_views(copy, off, 123);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(copy.axial[i].pix == views.axial[i].pix);

    AugmentConfig zeros;
    zeros.enabled = true;
    zeros.rotate_deg = 0.0;
    zeros.flip_prob = 0.0;
    zeros.intensity_jitter = 0.0;
    zeros.noise_sigma = 0.0;
    copy = views;
    augment_views(copy, zeros, 123);
    for (std::size_t i = 0; i < 3; ++i)
      CHECK(copy.axial[i].pix == views.axial[i].pix);
  }

  SUBCASE("the same seed reproduces the same augmentation") {
    AugmentConfig cfg;  // defaults on
    SampleViews a = views, b = views;
    augment_views(a, cfg, 777);
    augment_views(b, cfg, 777);
    for (std::size_t i = 0; i < 3; ++i) CHECK(a.axial[i].pix == b.axial[i].pix);
    SampleViews c = views;
    augment_views(c, cfg, 778);
    bool differs = false;
    for (std::size_t i = 0; i < 3; ++i)
      differs = differs || c.axial[i].pix != a.axial[i].pix;
    CHECK(differs);
  }

  SUBCASE("horizontal flip is an involution") {
    vol::Slice2D s = views.axial[0];
    vol::Slice2D flipped = s;
    flip_horizontal(flipped);
    CHECK(flipped.pix != s.pix);
    flip_horizontal(flipped);
    CHECK(flipped.pix == s.pix);
  }

  SUBCASE("zero-angle rotation is exact; small rotations stay in range") {
    const vol::Slice2D same = rotate_bilinear(views.axial[0], 0.0);
    CHECK(same.pix == views.axial[0].pix);
    const vol::Slice2D rot = rotate_bilinear(views.axial[0], 7.5);
    CHECK(rot.h == views.axial[0].h);
    for (float p : rot.pix) {
      CHECK(p >= -0.01f);
      CHECK(p <= 1.01f);
    }
  }
}

TEST_CASE("train_fold on a separable synthetic cohort") {
  CohortFixture fx;
  DataCache cache(fx.dir.string(), {16, 16, 19});
  TrainContext ctx;
  ctx.cache = &cache;
  ctx.norm.mode = vol::NormMode::ZScorePerImage;
  ctx.slices = 16;
  ctx.num_classes = 2;
  ctx.positive_class = 1;

  const cohort::FoldSplit split =
      cohort::make_fold_split(fx.labeled, fx.plan, 0, cohort::Selection::First);
  REQUIRE(!split.train.empty());
  REQUIRE(!split.val.empty());
  REQUIRE(!split.test.empty());

  SUBCASE("a fixed seed reproduces the FoldResult exactly") {
    auto m1 = models::build_model<float>(tiny_presnet());
    const FoldResult a = train_fold(*m1, split, ctx, quick_config(), 0);
    auto m2 = models::build_model<float>(tiny_presnet());
    const FoldResult b = train_fold(*m2, split, ctx, quick_config(), 0);
    CHECK(a.best_epoch == b.best_epoch);
    CHECK(a.epochs_trained == b.epochs_trained);
    CHECK(a.val_auc_trace == b.val_auc_trace);
    CHECK(a.test.auc == b.test.auc);
    CHECK(a.test.accuracy == b.test.accuracy);
  }

  SUBCASE("metrics are within range and the trace length matches") {
    auto model = models::build_model<float>(tiny_presnet());
    const FoldResult r = train_fold(*model, split, ctx, quick_config(), 0);
    CHECK(r.epochs_trained == 3);
    CHECK(r.val_auc_trace.size() == 3);
    CHECK(r.val.auc >= 0.0);
    CHECK(r.val.auc <= 1.0);
    CHECK(r.best_epoch >= 1);
    CHECK(r.best_epoch <= 3);
  }

  SUBCASE("empty splits are rejected") {
    auto model = models::build_model<float>(tiny_presnet());
    cohort::FoldSplit empty = split;
    empty.train.clear();
    CHECK_THROWS_WITH_AS(train_fold(*model, empty, ctx, quick_config(), 0),
                         doctest::Contains("empty split"), Error);
  }
}

TEST_CASE("evaluation never mutates parameters") {
  CohortFixture fx;
  DataCache cache(fx.dir.string(), {16, 16, 19});
  TrainContext ctx;
  ctx.cache = &cache;
  ctx.norm.mode = vol::NormMode::ZScorePerImage;
  ctx.slices = 16;
  ctx.num_classes = 2;
  ctx.positive_class = 1;

  auto model = models::build_model<float>(tiny_presnet());
  const auto dir = fs::temp_directory_path() / "adbench_eval_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  ckpt::CheckpointMeta meta;
  meta.model_id = model->config().id();
  meta.config_hash = "testhash";
  auto params = model->parameters();
  auto buffers = model->buffers();
  ckpt::save_checkpoint(path, meta, params, buffers);
  const std::uint64_t before = ckpt::file_checksum(path);

  evaluate_split(*model, fx.labeled.samples, ctx);

  // parameters byte-identical: re-save and compare checksums
  auto params2 = model->parameters();
  auto buffers2 = model->buffers();
  ckpt::save_checkpoint(path, meta, params2, buffers2);
  CHECK(ckpt::file_checksum(path) == before);
}

TEST_CASE("checkpoint round-trip restores parameters and metadata") {
  auto model = models::build_model<float>(tiny_presnet());
  const auto dir = fs::temp_directory_path() / "adbench_ckpt_rt";
  fs::create_directories(dir);
  const std::string path = (dir / "rt.ckpt").string();

  ckpt::CheckpointMeta meta;
  meta.model_id = model->config().id();
  meta.config_hash = "cafe1234";
  meta.model_config_json = models::model_config_to_json(model->config());
  auto params = model->parameters();
  auto buffers = model->buffers();
  ckpt::save_checkpoint(path, meta, params, buffers);

  // a differently seeded build has different parameters
  models::ModelConfig other_cfg = tiny_presnet();
  other_cfg.init_seed = 99;
  auto other = models::build_model<float>(other_cfg);
  auto oparams = other->parameters();
  bool differed = false;
  for (std::size_t i = 0; i < params.size(); ++i)
    differed = differed || oparams[i].tensor.values() != params[i].tensor.values();
  CHECK(differed);

  auto obuffers = other->buffers();
  const auto loaded_meta = ckpt::load_checkpoint(path, oparams, obuffers);
  CHECK(loaded_meta.model_id == "pruned_resnet");
  CHECK(loaded_meta.config_hash == "cafe1234");
  for (std::size_t i = 0; i < params.size(); ++i)
    CHECK(oparams[i].tensor.values() == params[i].tensor.values());

  const auto meta_only = ckpt::read_checkpoint_meta(path);
  CHECK(meta_only.model_config_json.find("pruned_resnet") != std::string::npos);
}

TEST_CASE("external label mapping enforces the label space") {
  std::vector<cohort::VisitRecord> visits(3);
  visits[0] = {"E1", "E1_V1", "2010-01-01", cohort::Dx::CN, "e1.vol"};
  visits[1] = {"E2", "E2_V1", "2010-01-01", cohort::Dx::AD, "e2.vol"};
  visits[2] = {"E3", "E3_V1", "2010-01-01", cohort::Dx::MCI, "e3.vol"};

  SUBCASE("a binary model rejects MCI scans") {
    CHECK_THROWS_WITH_AS(label_external(visits, 2),
                         doctest::Contains("label-space"), Error);
  }

  SUBCASE("a ternary model accepts all three") {
    const auto samples = label_external(visits, 3);
    REQUIRE(samples.size() == 3);
    CHECK(samples[0].label == 0);
    CHECK(samples[1].label == 2);
    CHECK(samples[2].label == 1);
  }

  SUBCASE("binary mapping without MCI") {
    visits.pop_back();
    const auto samples = label_external(visits, 2);
    CHECK(samples[0].label == 0);
    CHECK(samples[1].label == 1);
  }
}

TEST_CASE("cross-validation summary shape and fold disjointness") {
  CohortFixture fx;
  DataCache cache(fx.dir.string(), {16, 16, 19});
  TrainContext ctx;
  ctx.cache = &cache;
  ctx.norm.mode = vol::NormMode::ZScorePerImage;
  ctx.slices = 16;
  ctx.num_classes = 2;
  ctx.positive_class = 1;

  std::vector<std::set<std::string>> test_subjects(3);
  for (int f = 0; f < 3; ++f) {
    const auto split =
        cohort::make_fold_split(fx.labeled, fx.plan, f, cohort::Selection::First);
    for (const auto& s : split.test) test_subjects[f].insert(s.subject_id);
  }
  for (int a = 0; a < 3; ++a)
    for (int b = a + 1; b < 3; ++b)
      for (const auto& sid : test_subjects[a])
        CHECK(test_subjects[b].count(sid) == 0);

  const CrossValResult cv = cross_validate(tiny_presnet(), fx.labeled, fx.plan,
                                           cohort::Selection::First, ctx,
                                           quick_config());
  CHECK(cv.folds.size() == 3);
  for (int f = 0; f < 3; ++f) CHECK(cv.folds[f].fold == f);
}

TEST_CASE("inverse-frequency weighting lifts minority sensitivity") {
  // 9:1 imbalanced, overlapping classes; same seed with and without weights
  const auto dir = fs::temp_directory_path() / "adbench_imbalance";
  if (!fs::exists(dir / "manifest.csv")) {
    synth::CohortSpec spec = synth::fleni_like_spec(/*small=*/true);
    spec.subjects = 40;
    spec.mixture = {0.9, 0.0, 0.1};
    spec.noise_sigma = 0.25;  // heavy overlap
    spec.phantom.factor_ad = 0.85;
    synth::generate_cohort(spec, 13, dir.string());
  }
  const auto visits = cohort::load_manifest((dir / "manifest.csv").string());
  const auto labeled = cohort::apply_labeling(visits, cohort::Labeling::Visit953);

  // stratified so every split keeps both classes despite the 9:1 imbalance
  std::vector<std::pair<std::string, int>> subject_labels;
  for (const auto& s : labeled.samples)
    subject_labels.push_back({s.subject_id, s.label});
  const cohort::SplitPlan plan =
      cohort::stratified_subject_kfold(subject_labels, 3, 29);

  DataCache cache(dir.string(), {16, 16, 19});
  TrainContext ctx;
  ctx.cache = &cache;
  ctx.norm.mode = vol::NormMode::ZScorePerImage;
  ctx.slices = 16;
  ctx.num_classes = 2;
  ctx.positive_class = 1;

  const auto split =
      cohort::make_fold_split(labeled, plan, 0, cohort::Selection::All);

  TrainConfig weighted = quick_config();
  weighted.max_epochs = 8;
  weighted.patience = 8;
  weighted.lr = 2e-3;
  TrainConfig unweighted = weighted;
  unweighted.weighted_loss = false;

  auto m1 = models::build_model<float>(tiny_presnet());
  const FoldResult with_weights = train_fold(*m1, split, ctx, weighted, 0);
  auto m2 = models::build_model<float>(tiny_presnet());
  const FoldResult without = train_fold(*m2, split, ctx, unweighted, 0);

  // the weighted run must not lose minority sensitivity
  CHECK(with_weights.test.sensitivity >= without.test.sensitivity);
}
