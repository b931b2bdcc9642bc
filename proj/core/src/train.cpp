#include "adbench/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "adbench/adam.hpp"
#include "adbench/checkpoint.hpp"
#include "adbench/metrics.hpp"

namespace adbench::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError(msg("lr must be > 0, got ", lr));
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
  if (patience < 1 || patience > max_epochs)
    throw ConfigError(msg("patience must be in [1, max_epochs], got ", patience));
}

TrainConfig default_train_config(models::ModelKind kind) {
  TrainConfig cfg;
  if (kind == models::ModelKind::InceptionGrid) {
    cfg.lr = 1e-4;
    cfg.batch_size = 32;
  } else {
    cfg.lr = 5e-4;
    cfg.batch_size = 8;
  }
  cfg.max_epochs = 100;
  cfg.patience = 30;
  return cfg;
}

// ---- augmentation ----

void flip_horizontal(vol::Slice2D& s) {
  for (std::size_t r = 0; r < s.h; ++r)
    std::reverse(s.pix.begin() + static_cast<long>(r * s.w),
                 s.pix.begin() + static_cast<long>((r + 1) * s.w));
}

vol::Slice2D rotate_bilinear(const vol::Slice2D& s, double degrees) {
  if (degrees == 0.0) return s;
  const double rad = degrees * M_PI / 180.0;
  const double c = std::cos(rad), sn = std::sin(rad);
  const double cy = (static_cast<double>(s.h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(s.w) - 1.0) / 2.0;
  vol::Slice2D out(s.h, s.w);
  for (std::size_t r = 0; r < s.h; ++r) {
    for (std::size_t col = 0; col < s.w; ++col) {
      // inverse rotation of the output coordinate
      const double dy = static_cast<double>(r) - cy;
      const double dx = static_cast<double>(col) - cx;
      const double sy = c * dy + sn * dx + cy;
      const double sx = -sn * dy + c * dx + cx;
      const double fy = std::floor(sy), fx = std::floor(sx);
      const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
      const double wy = sy - fy, wx = sx - fx;
      double acc = 0.0;
      for (int oy = 0; oy <= 1; ++oy)
        for (int ox = 0; ox <= 1; ++ox) {
          const long yy = y0 + oy, xx = x0 + ox;
          if (yy < 0 || yy >= static_cast<long>(s.h) || xx < 0 ||
              xx >= static_cast<long>(s.w))
            continue;
          const double w = (oy ? wy : 1.0 - wy) * (ox ? wx : 1.0 - wx);
          acc += w * static_cast<double>(
                         s.pix[static_cast<std::size_t>(yy) * s.w +
                               static_cast<std::size_t>(xx)]);
        }
      out.at(r, col) = static_cast<float>(acc);
    }
  }
  return out;
}

void augment_views(SampleViews& views, const AugmentConfig& cfg, std::uint64_t seed) {
  if (!cfg.enabled) return;
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> prob(0.0, 1.0);

  const double angle = cfg.rotate_deg > 0.0 ? cfg.rotate_deg * unit(rng) : 0.0;
  const bool flip = cfg.flip_prob > 0.0 && prob(rng) < cfg.flip_prob;
  const double gain =
      cfg.intensity_jitter > 0.0 ? 1.0 + cfg.intensity_jitter * unit(rng) : 1.0;

  auto all_slices = [&](auto&& fn) {
    for (auto* set : {&views.axial, &views.coronal, &views.sagittal})
      for (auto& s : *set) fn(s);
  };

  if (angle != 0.0)
    all_slices([&](vol::Slice2D& s) { s = rotate_bilinear(s, angle); });
  if (flip) all_slices([&](vol::Slice2D& s) { flip_horizontal(s); });
  if (gain != 1.0)
    all_slices([&](vol::Slice2D& s) {
      for (auto& p : s.pix) p = static_cast<float>(p * gain);
    });

  if (cfg.noise_sigma > 0.0) {
    float lo = 0.0f, hi = 0.0f;
    bool first = true;
    all_slices([&](vol::Slice2D& s) {
      for (float p : s.pix) {
        if (first) {
          lo = hi = p;
          first = false;
        } else {
          lo = std::min(lo, p);
          hi = std::max(hi, p);
        }
      }
    });
    const double range = static_cast<double>(hi) - lo;
    if (range > 0.0) {
      std::normal_distribution<double> noise(0.0, cfg.noise_sigma * range);
      all_slices([&](vol::Slice2D& s) {
        for (auto& p : s.pix) p = static_cast<float>(p + noise(rng));
      });
    }
  }
}

// ---- data assembly ----

DataCache::DataCache(std::string root_dir, std::array<std::size_t, 3> grid,
                     double mask_tau)
    : root_(std::move(root_dir)), grid_(grid), mask_tau_(mask_tau) {}

const vol::Volume& DataCache::resampled(const std::string& volume_path) {
  auto it = volumes_.find(volume_path);
  if (it != volumes_.end()) return it->second;
  fs::path p(volume_path);
  if (p.is_relative() && !root_.empty()) p = fs::path(root_) / p;
  vol::Volume raw = vol::load_volume(p.string());
  return volumes_.emplace(volume_path, vol::resample_nn(raw, grid_)).first->second;
}

const std::vector<std::uint8_t>& DataCache::mask(const std::string& volume_path) {
  auto it = masks_.find(volume_path);
  if (it != masks_.end()) return it->second;
  return masks_.emplace(volume_path, vol::brain_mask(resampled(volume_path), mask_tau_))
      .first->second;
}

SampleViews make_views(const vol::Volume& normalized, models::InputKind kind,
                       int slices, std::array<std::size_t, 3> grid) {
  SampleViews views;
  switch (kind) {
    case models::InputKind::Montage: {
      views.axial = vol::select_axial_slices(normalized, 16).slices;
      break;
    }
    case models::InputKind::AxialStack: {
      views.axial =
          vol::select_axial_slices(normalized, static_cast<std::size_t>(slices)).slices;
      break;
    }
    case models::InputKind::AllPlanes: {
      vol::PlaneSlices planes = vol::extract_plane_slices(normalized, grid);
      views.axial = std::move(planes.axial.slices);
      views.coronal = std::move(planes.coronal.slices);
      views.sagittal = std::move(planes.sagittal.slices);
      break;
    }
  }
  return views;
}

namespace {

Tensor<float> stack_tensor(const std::vector<const std::vector<vol::Slice2D>*>& rows) {
  const std::size_t n = rows.size();
  const std::size_t s = rows[0]->size();
  const std::size_t h = (*rows[0])[0].h, w = (*rows[0])[0].w;
  Tensor<float> t({n, s, h, w});
  float* dst = t.data();
  for (std::size_t i = 0; i < n; ++i) {
    if (rows[i]->size() != s)
      throw ShapeError("pack_batch: inconsistent slice counts in batch");
    for (std::size_t j = 0; j < s; ++j) {
      const auto& sl = (*rows[i])[j];
      if (sl.h != h || sl.w != w)
        throw ShapeError("pack_batch: inconsistent slice sizes in batch");
      std::memcpy(dst + (i * s + j) * h * w, sl.pix.data(), h * w * sizeof(float));
    }
  }
  return t;
}

}  // namespace

models::Batch<float> pack_batch(models::InputKind kind,
                                const std::vector<SampleViews>& views,
                                const std::vector<int>& labels) {
  if (views.empty()) throw Error("pack_batch: empty batch");
  models::Batch<float> batch;
  batch.labels = labels;
  switch (kind) {
    case models::InputKind::Montage: {
      std::vector<vol::Slice2D> montages;
      montages.reserve(views.size());
      for (const auto& v : views) {
        vol::SliceSet set;
        set.slices = v.axial;
        set.source_indices.resize(v.axial.size());
        montages.push_back(vol::make_grid_montage(set));
      }
      const std::size_t h = montages[0].h, w = montages[0].w;
      Tensor<float> t({views.size(), 1, h, w});
      for (std::size_t i = 0; i < montages.size(); ++i)
        std::memcpy(t.data() + i * h * w, montages[i].pix.data(),
                    h * w * sizeof(float));
      batch.montage = t;
      break;
    }
    case models::InputKind::AxialStack: {
      std::vector<const std::vector<vol::Slice2D>*> rows;
      for (const auto& v : views) rows.push_back(&v.axial);
      batch.axial = stack_tensor(rows);
      break;
    }
    case models::InputKind::AllPlanes: {
      std::vector<const std::vector<vol::Slice2D>*> ax, co, sa;
      for (const auto& v : views) {
        ax.push_back(&v.axial);
        co.push_back(&v.coronal);
        sa.push_back(&v.sagittal);
      }
      batch.axial = stack_tensor(ax);
      batch.coronal = stack_tensor(co);
      batch.sagittal = stack_tensor(sa);
      break;
    }
  }
  return batch;
}

namespace {

SampleViews sample_views(const cohort::LabeledSample& s, const TrainContext& ctx,
                         models::InputKind kind) {
  const vol::Volume& resampled = ctx.cache->resampled(s.volume_path);
  const auto& mask = ctx.cache->mask(s.volume_path);
  vol::NormalizeResult norm = vol::normalize(resampled, ctx.norm, &mask);
  return make_views(norm.volume, kind, ctx.slices, ctx.cache->grid());
}

struct EvalScores {
  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
};

EvalScores collect_scores(models::Model<float>& model,
                          const std::vector<cohort::LabeledSample>& samples,
                          const TrainContext& ctx) {
  if (samples.empty()) throw Error("evaluate: empty sample set");
  const models::InputKind kind = model.input_kind();
  constexpr std::size_t kEvalBatch = 16;
  EvalScores out;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(samples.size(), begin + kEvalBatch);
    std::vector<SampleViews> views;
    std::vector<int> labels;
    for (std::size_t i = begin; i < end; ++i) {
      views.push_back(sample_views(samples[i], ctx, kind));
      labels.push_back(samples[i].label);
    }
    models::Batch<float> batch = pack_batch(kind, views, labels);
    Tensor<float> probs = model.predict_probs(batch);
    const std::size_t c = probs.dim(1);
    for (std::size_t i = 0; i < probs.dim(0); ++i) {
      std::vector<double> row(c);
      for (std::size_t j = 0; j < c; ++j)
        row[j] = static_cast<double>(probs.data()[i * c + j]);
      out.rows.push_back(std::move(row));
      out.labels.push_back(labels[i]);
    }
  }
  return out;
}

SplitMetrics score_metrics(const EvalScores& scores, int num_classes,
                           int positive_class) {
  SplitMetrics m;
  bool has_middle = false;
  for (int l : scores.labels)
    if (l != 0 && l != positive_class) has_middle = true;

  if (num_classes == 2) {
    std::vector<double> pos(scores.rows.size());
    for (std::size_t i = 0; i < scores.rows.size(); ++i)
      pos[i] = scores.rows[i][1];
    m.auc = metrics::roc_auc_binary(pos, scores.labels);
  } else if (!has_middle) {
    // ternary model scored against a binary (AD / non-AD) ground truth:
    // AD-vs-rest on the AD probability
    std::vector<double> pos(scores.rows.size());
    std::vector<int> bin(scores.labels.size());
    for (std::size_t i = 0; i < scores.rows.size(); ++i) {
      pos[i] = scores.rows[i][static_cast<std::size_t>(positive_class)];
      bin[i] = scores.labels[i] == positive_class ? 1 : 0;
    }
    m.auc = metrics::roc_auc_binary(pos, bin);
  } else {
    m.auc = metrics::roc_auc_multiclass(scores.rows, scores.labels);
  }
  const metrics::ConfusionMetrics cm =
      metrics::confusion_metrics(scores.rows, scores.labels, positive_class);
  m.accuracy = cm.accuracy;
  m.sensitivity = cm.sensitivity;
  m.specificity = cm.specificity;
  return m;
}

struct Snapshot {
  std::vector<std::vector<float>> params;
  std::vector<std::vector<float>> buffers;
};

Snapshot take_snapshot(models::Model<float>& model) {
  Snapshot s;
  for (const auto& p : model.parameters()) s.params.push_back(p.tensor.values());
  for (const auto& b : model.buffers()) s.buffers.push_back(*b.data);
  return s;
}

void restore_snapshot(models::Model<float>& model, const Snapshot& s) {
  auto params = model.parameters();
  auto buffers = model.buffers();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<float> t = params[i].tensor;
    std::copy(s.params[i].begin(), s.params[i].end(), t.data());
  }
  for (std::size_t i = 0; i < buffers.size(); ++i) *buffers[i].data = s.buffers[i];
}

}  // namespace

SplitMetrics evaluate_split(models::Model<float>& model,
                            const std::vector<cohort::LabeledSample>& samples,
                            const TrainContext& ctx) {
  const EvalScores scores = collect_scores(model, samples, ctx);
  return score_metrics(scores, model.config().num_classes, ctx.positive_class);
}

std::vector<cohort::LabeledSample> label_external(
    const std::vector<cohort::VisitRecord>& visits, int num_classes) {
  std::vector<cohort::LabeledSample> out;
  for (const auto& v : visits) {
    const auto canon = cohort::normalize_diagnosis(v.diagnosis);
    if (!canon) continue;  // SMC-labeled scans are dropped
    int label;
    if (num_classes == 2) {
      if (*canon == cohort::CanonicalDx::MCI)
        throw Error(msg("label-space error: external manifest contains an MCI "
                        "scan (", v.scan_id, ") but the model is binary"));
      label = *canon == cohort::CanonicalDx::AD ? 1 : 0;
    } else {
      label = static_cast<int>(*canon);
    }
    out.push_back({v.subject_id, v.scan_id, v.acquisition_date, v.volume_path, label});
  }
  if (out.empty()) throw Error("label_external: no usable scans in manifest");
  return out;
}

FoldResult train_fold(models::Model<float>& model, const cohort::FoldSplit& split,
                      const TrainContext& ctx, const TrainConfig& cfg, int fold,
                      const std::string& checkpoint_path,
                      const std::string& config_hash) {
  cfg.validate();
  if (split.train.empty() || split.val.empty() || split.test.empty())
    throw Error(msg("train_fold: empty split (train=", split.train.size(),
                    ", val=", split.val.size(), ", test=", split.test.size(), ")"));

  const models::InputKind kind = model.input_kind();
  const int num_classes = model.config().num_classes;

  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (const auto& s : split.train) {
    if (s.label < 0 || s.label >= num_classes)
      throw Error(msg("train_fold: label ", s.label, " outside model's ",
                      num_classes, "-class space"));
    ++counts[static_cast<std::size_t>(s.label)];
  }
  std::vector<double> weights(static_cast<std::size_t>(num_classes), 1.0);
  if (cfg.weighted_loss) weights = cohort::class_weights(counts);

  AdamConfig acfg;
  acfg.lr = cfg.lr;
  Adam<float> adam(model.parameters(), acfg);
  model.seed_dropout(mix_seed(cfg.seed, static_cast<std::uint64_t>(fold), 0xd20ULL));

  EarlyStopping stopper{cfg.patience, cfg.min_delta};
  Snapshot best = take_snapshot(model);

  FoldResult result;
  result.fold = fold;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    // per-epoch reshuffle from a seed derived from (run seed, epoch)
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(mix_seed(cfg.seed, 0x5f1eULL, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t begin = 0; begin < order.size();
         begin += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end =
          std::min(order.size(), begin + static_cast<std::size_t>(cfg.batch_size));
      std::vector<SampleViews> views;
      std::vector<int> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& sample = split.train[order[i]];
        SampleViews v = sample_views(sample, ctx, kind);
        augment_views(v, cfg.augment,
                      mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch),
                               0xa06ULL + order[i]));
        views.push_back(std::move(v));
        labels.push_back(sample.label);
      }
      models::Batch<float> batch = pack_batch(kind, views, labels);

      Tape<float> tape;
      Tensor<float> logits = model.forward(tape, batch, /*training=*/true);
      Tensor<float> loss = tape.weighted_cross_entropy(logits, labels, weights);
      if (!std::isfinite(static_cast<double>(loss.item())))
        throw NumericError(msg("train_fold: non-finite loss at epoch ", epoch,
                               ", step ", begin / static_cast<std::size_t>(cfg.batch_size)));
      adam.zero_grad();
      tape.backward(loss);
      adam.step();
    }

    const SplitMetrics val = evaluate_split(model, split.val, ctx);
    result.val_auc_trace.push_back(val.auc);
    result.epochs_trained = epoch;
    if (stopper.update(epoch, val.auc)) best = take_snapshot(model);
    if (stopper.should_stop(epoch)) break;
  }

  result.best_epoch = stopper.best_epoch;
  restore_snapshot(model, best);
  result.val = evaluate_split(model, split.val, ctx);
  result.test = evaluate_split(model, split.test, ctx);

  if (!checkpoint_path.empty()) {
    ckpt::CheckpointMeta meta;
    meta.model_id = model.config().id();
    meta.config_hash =
        config_hash.empty() ? hex64(model.config().init_seed) : config_hash;
    meta.model_config_json = models::model_config_to_json(model.config());
    auto params = model.parameters();
    auto buffers = model.buffers();
    ckpt::save_checkpoint(checkpoint_path, meta, params, buffers);
    result.checkpoint_path = checkpoint_path;
  }
  return result;
}

CrossValResult cross_validate(const models::ModelConfig& mcfg,
                              const cohort::LabelingOutcome& labeled,
                              const cohort::SplitPlan& plan,
                              cohort::Selection selection, TrainContext& ctx,
                              const TrainConfig& cfg,
                              const std::string& checkpoint_dir,
                              const std::string& config_hash,
                              const FoldHook& hook) {
  CrossValResult result;
  for (int fold = 0; fold < plan.k; ++fold) {
    cohort::FoldSplit split = cohort::make_fold_split(labeled, plan, fold, selection);

    TrainContext fold_ctx = ctx;
    if (ctx.norm.mode == vol::NormMode::ZScoreGlobal) {
      vol::GlobalStatsAccumulator acc;
      for (const auto& s : split.train)
        acc.add(ctx.cache->resampled(s.volume_path), ctx.cache->mask(s.volume_path));
      fold_ctx.norm.global =
          acc.finalize(msg("train split, fold ", fold, ", seed ", cfg.seed));
    }

    models::ModelConfig fold_cfg = mcfg;
    fold_cfg.init_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(fold), 0x10debULL);
    auto model = models::build_model<float>(fold_cfg);

    std::string ckpt_path;
    if (!checkpoint_dir.empty())
      ckpt_path = (std::filesystem::path(checkpoint_dir) /
                   ("fold" + std::to_string(fold) + ".ckpt"))
                      .string();
    result.folds.push_back(
        train_fold(*model, split, fold_ctx, cfg, fold, ckpt_path, config_hash));
    if (hook) hook(fold, *model, result.folds.back(), fold_ctx);
  }
  return result;
}

}  // namespace adbench::train
