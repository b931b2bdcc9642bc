#include "adbench/occlusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace adbench::occl {

Baseline parse_baseline(const std::string& name) {
  if (name == "zero") return Baseline::Zero;
  if (name == "image-mean" || name == "mean") return Baseline::ImageMean;
  throw ConfigError(msg("unknown occlusion baseline '", name,
                        "' (expected zero or image-mean)"));
}

void OcclusionConfig::validate(std::size_t image_h, std::size_t image_w) const {
  if (patch == 0 || stride == 0)
    throw ConfigError("occlusion patch and stride must be positive");
  if (stride > patch)
    throw ConfigError(msg("occlusion stride ", stride, " must be <= patch ",
                          patch, " for full coverage"));
  if (patch > image_h || patch > image_w)
    throw ConfigError(msg("occlusion patch ", patch, " does not fit in ",
                          image_h, "x", image_w, " image"));
  if (target == Target::Given && given_label < 0)
    throw ConfigError("occlusion target 'given' requires a class label");
}

RelevanceMap occlusion_map(const std::function<double(const vol::Slice2D&)>& prob_fn,
                           const vol::Slice2D& image, const OcclusionConfig& cfg) {
  cfg.validate(image.h, image.w);
  RelevanceMap map;
  map.image_h = image.h;
  map.image_w = image.w;
  map.patch = cfg.patch;
  map.stride = cfg.stride;
  map.baseline = cfg.baseline == Baseline::Zero ? "zero" : "image-mean";
  map.grid_h = (image.h - cfg.patch) / cfg.stride + 1;
  map.grid_w = (image.w - cfg.patch) / cfg.stride + 1;
  map.grid.assign(map.grid_h * map.grid_w, 0.0);

  float baseline_value = 0.0f;
  if (cfg.baseline == Baseline::ImageMean) {
    double sum = 0.0;
    for (float p : image.pix) sum += p;
    baseline_value = static_cast<float>(sum / static_cast<double>(image.pix.size()));
  }

  const double reference = prob_fn(image);

  vol::Slice2D work = image;
  for (std::size_t gy = 0; gy < map.grid_h; ++gy) {
    for (std::size_t gx = 0; gx < map.grid_w; ++gx) {
      const std::size_t y0 = gy * cfg.stride, x0 = gx * cfg.stride;
      // occlude
      for (std::size_t y = 0; y < cfg.patch; ++y)
        for (std::size_t x = 0; x < cfg.patch; ++x)
          work.at(y0 + y, x0 + x) = baseline_value;
      map.grid[gy * map.grid_w + gx] = reference - prob_fn(work);
      // restore
      for (std::size_t y = 0; y < cfg.patch; ++y)
        for (std::size_t x = 0; x < cfg.patch; ++x)
          work.at(y0 + y, x0 + x) = image.at(y0 + y, x0 + x);
    }
  }

  // average overlapping patch relevances into pixel space
  map.pixel.assign(image.h * image.w, 0.0);
  std::vector<std::uint32_t> cover(image.h * image.w, 0);
  for (std::size_t gy = 0; gy < map.grid_h; ++gy)
    for (std::size_t gx = 0; gx < map.grid_w; ++gx) {
      const double v = map.grid[gy * map.grid_w + gx];
      for (std::size_t y = 0; y < cfg.patch; ++y)
        for (std::size_t x = 0; x < cfg.patch; ++x) {
          const std::size_t idx = (gy * cfg.stride + y) * image.w + gx * cfg.stride + x;
          map.pixel[idx] += v;
          ++cover[idx];
        }
    }
  for (std::size_t i = 0; i < map.pixel.size(); ++i)
    if (cover[i]) map.pixel[i] /= static_cast<double>(cover[i]);
  return map;
}

namespace {

int resolve_target_class(models::Model<float>& model, const models::Batch<float>& batch,
                         const OcclusionConfig& cfg) {
  if (cfg.target == Target::Given) {
    if (cfg.given_label < 0 || cfg.given_label >= model.config().num_classes)
      throw ConfigError(msg("occlusion target class ", cfg.given_label,
                            " out of range for ", model.config().num_classes,
                            " classes"));
    return cfg.given_label;
  }
  Tensor<float> probs = model.predict_probs(batch);
  const std::size_t c = probs.dim(1);
  int best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (probs.data()[j] > probs.data()[best]) best = static_cast<int>(j);
  return best;
}

}  // namespace

RelevanceMap model_occlusion(models::Model<float>& model,
                             const vol::Volume& preprocessed,
                             const train::TrainContext& ctx,
                             const OcclusionConfig& cfg,
                             const std::string& sample_id) {
  const models::InputKind kind = model.input_kind();
  const std::array<std::size_t, 3> grid =
      ctx.cache ? ctx.cache->grid() : preprocessed.dims;
  train::SampleViews views =
      train::make_views(preprocessed, kind, ctx.slices, grid);

  RelevanceMap map;
  if (kind == models::InputKind::Montage || kind == models::InputKind::AxialStack) {
    // montage space: a patch position may straddle the 4x4 cell boundaries,
    // in which case it occludes the corresponding voxels of both slices
    vol::SliceSet set;
    set.slices = views.axial;
    set.source_indices.resize(views.axial.size());
    const vol::Slice2D montage = vol::make_grid_montage(set);

    auto prob_fn = [&](const vol::Slice2D& occluded) {
      train::SampleViews v;
      v.axial = vol::split_grid_montage(occluded).slices;
      models::Batch<float> batch = train::pack_batch(kind, {v}, {0});
      Tensor<float> probs = model.predict_probs(batch);
      return static_cast<double>(probs.data()[map.target_class]);
    };
    // resolve the target on the unoccluded input first
    models::Batch<float> batch = train::pack_batch(kind, {views}, {0});
    map.target_class = resolve_target_class(model, batch, cfg);
    RelevanceMap computed = occlusion_map(prob_fn, montage, cfg);
    computed.target_class = map.target_class;
    map = std::move(computed);
  } else {
    // volume-input transformer: occlude one axial slice in volume space
    const std::size_t z_count = preprocessed.dims[2];
    std::size_t z = cfg.axial_slice < 0 ? z_count / 2
                                        : static_cast<std::size_t>(cfg.axial_slice);
    if (z >= z_count)
      throw ConfigError(msg("occlusion slice ", z, " out of range [0,", z_count, ")"));
    vol::Slice2D base(preprocessed.dims[1], preprocessed.dims[0]);
    for (std::size_t y = 0; y < base.h; ++y)
      for (std::size_t x = 0; x < base.w; ++x) base.at(y, x) = preprocessed.at(x, y, z);

    auto prob_fn = [&](const vol::Slice2D& occluded) {
      vol::Volume v = preprocessed;
      for (std::size_t y = 0; y < occluded.h; ++y)
        for (std::size_t x = 0; x < occluded.w; ++x)
          v.at(x, y, z) = occluded.at(y, x);
      train::SampleViews sv = train::make_views(v, kind, ctx.slices, grid);
      models::Batch<float> batch = train::pack_batch(kind, {sv}, {0});
      Tensor<float> probs = model.predict_probs(batch);
      return static_cast<double>(probs.data()[map.target_class]);
    };
    models::Batch<float> batch = train::pack_batch(kind, {views}, {0});
    map.target_class = resolve_target_class(model, batch, cfg);
    RelevanceMap computed = occlusion_map(prob_fn, base, cfg);
    computed.target_class = map.target_class;
    map = std::move(computed);
  }
  map.model_id = model.config().id();
  map.sample_id = sample_id;
  return map;
}

void export_heatmap(const RelevanceMap& map, const std::string& base_path) {
  for (double v : map.grid)
    if (!std::isfinite(v))
      throw NumericError("export_heatmap: non-finite relevance values");

  // raw grid values, one row per line
  {
    std::ofstream csv(base_path + ".relevance.csv");
    if (!csv) throw FormatError(msg("cannot write ", base_path, ".relevance.csv"));
    char buf[64];
    for (std::size_t r = 0; r < map.grid_h; ++r) {
      for (std::size_t c = 0; c < map.grid_w; ++c) {
        std::snprintf(buf, sizeof(buf), "%.9g", map.grid[r * map.grid_w + c]);
        csv << buf << (c + 1 < map.grid_w ? "," : "");
      }
      csv << "\n";
    }
  }

  // min-max scaled pixel map; a degenerate (constant) map becomes all zeros
  {
    double lo = map.pixel.empty() ? 0.0 : map.pixel[0];
    double hi = lo;
    for (double v : map.pixel) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    std::ofstream pgm(base_path + ".relevance.pgm", std::ios::binary);
    if (!pgm) throw FormatError(msg("cannot write ", base_path, ".relevance.pgm"));
    pgm << "P5\n" << map.image_w << " " << map.image_h << "\n255\n";
    std::vector<unsigned char> bytes(map.pixel.size(), 0);
    if (hi > lo) {
      for (std::size_t i = 0; i < map.pixel.size(); ++i)
        bytes[i] = static_cast<unsigned char>(
            std::lround((map.pixel[i] - lo) / (hi - lo) * 255.0));
    }
    pgm.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
  }
}

}  // namespace adbench::occl
