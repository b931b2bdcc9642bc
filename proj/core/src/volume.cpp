#include "adbench/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace adbench::vol {

using nlohmann::json;

void Volume::validate_header() const {
  for (int i = 0; i < 3; ++i) {
    if (dims[i] < 1)
      throw ShapeError(msg("volume dim ", i, " must be >= 1, got ", dims[i]));
    if (!(spacing[i] > 0))
      throw ShapeError(msg("volume spacing ", i, " must be > 0, got ", spacing[i]));
  }
}

void Volume::validate() const {
  validate_header();
  if (voxels.size() != size())
    throw ShapeError(msg("voxel count ", voxels.size(), " != dims product ", size()));
}

std::string to_string(NormMode mode) {
  switch (mode) {
    case NormMode::ZScorePerImage: return "zscore_per_image";
    case NormMode::ZScoreGlobal: return "zscore_global";
    case NormMode::MinMax: return "minmax";
  }
  return "?";
}

NormMode parse_norm_mode(const std::string& name) {
  if (name == "zscore_per_image" || name == "zscore") return NormMode::ZScorePerImage;
  if (name == "zscore_global") return NormMode::ZScoreGlobal;
  if (name == "minmax" || name == "min-max") return NormMode::MinMax;
  throw ConfigError(msg("unknown normalization mode '", name,
                        "' (expected zscore_per_image, zscore_global or minmax)"));
}

namespace {

static_assert(sizeof(float) == 4, "volume payload requires 32-bit float");

std::string base_path(const std::string& path) {
  if (path.ends_with(".vol.json")) return path.substr(0, path.size() - 5);
  if (path.ends_with(".vol.raw")) return path.substr(0, path.size() - 4);
  if (path.ends_with(".vol")) return path;
  return path + ".vol";
}

void byteswap_f32(std::vector<float>& v) {
  for (auto& f : v) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    u = ((u & 0xff000000u) >> 24) | ((u & 0x00ff0000u) >> 8) |
        ((u & 0x0000ff00u) << 8) | ((u & 0x000000ffu) << 24);
    std::memcpy(&f, &u, 4);
  }
}

json norm_to_json(const NormalizationSpec& spec) {
  json j;
  j["mode"] = to_string(spec.mode);
  if (spec.global) {
    j["global_mean"] = spec.global->mean;
    j["global_stddev"] = spec.global->stddev;
    j["provenance"] = spec.global->provenance;
  }
  return j;
}

void save_with_sidecar(const Volume& v, const std::string& path, const json& extra) {
  v.validate();
  const std::string base = base_path(path);
  json j;
  j["dims"] = {v.dims[0], v.dims[1], v.dims[2]};
  j["spacing"] = {v.spacing[0], v.spacing[1], v.spacing[2]};
  j["dtype"] = "f32";
  j["byte_order"] = "little";
  for (auto& [k, val] : extra.items()) j[k] = val;

  std::ofstream sidecar(base + ".json");
  if (!sidecar) throw FormatError(msg("cannot write sidecar ", base, ".json"));
  sidecar << j.dump(2) << "\n";
  sidecar.close();

  std::ofstream raw(base + ".raw", std::ios::binary);
  if (!raw) throw FormatError(msg("cannot write payload ", base, ".raw"));
  if constexpr (std::endian::native == std::endian::little) {
    raw.write(reinterpret_cast<const char*>(v.voxels.data()),
              static_cast<std::streamsize>(v.voxels.size() * 4));
  } else {
    std::vector<float> tmp = v.voxels;
    byteswap_f32(tmp);
    raw.write(reinterpret_cast<const char*>(tmp.data()),
              static_cast<std::streamsize>(tmp.size() * 4));
  }
  if (!raw) throw FormatError(msg("short write to ", base, ".raw"));
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
  save_with_sidecar(v, path, json::object());
}

void save_preprocessed(const Volume& v, const std::string& path,
                       const NormalizationSpec& spec) {
  json extra;
  extra["normalization"] = norm_to_json(spec);
  save_with_sidecar(v, path, extra);
}

Volume load_volume(const std::string& path) {
  const std::string base = base_path(path);
  std::ifstream sidecar(base + ".json");
  if (!sidecar)
    throw FormatError(msg("missing sidecar ", base, ".json"));
  json j;
  try {
    sidecar >> j;
  } catch (const json::exception& e) {
    throw FormatError(msg("malformed sidecar ", base, ".json: ", e.what()));
  }
  for (const char* key : {"dims", "spacing", "dtype", "byte_order"})
    if (!j.contains(key))
      throw FormatError(msg("sidecar ", base, ".json missing field '", key, "'"));
  if (j["dtype"] != "f32")
    throw FormatError(msg("unsupported dtype '", j["dtype"].get<std::string>(), "'"));
  const std::string order = j["byte_order"].get<std::string>();
  if (order != "little" && order != "big")
    throw FormatError(msg("unsupported byte order '", order, "'"));

  Volume v;
  for (int i = 0; i < 3; ++i) {
    v.dims[i] = j["dims"][i].get<std::size_t>();
    v.spacing[i] = j["spacing"][i].get<double>();
  }
  v.validate_header();

  std::ifstream raw(base + ".raw", std::ios::binary | std::ios::ate);
  if (!raw) throw FormatError(msg("missing payload ", base, ".raw"));
  const auto bytes = static_cast<std::size_t>(raw.tellg());
  if (bytes != v.size() * 4)
    throw FormatError(msg("corrupt volume ", base, ".raw: payload is ", bytes,
                          " bytes, expected ", v.size() * 4, " for dims ",
                          v.dims[0], "x", v.dims[1], "x", v.dims[2]));
  raw.seekg(0);
  v.voxels.resize(v.size());
  raw.read(reinterpret_cast<char*>(v.voxels.data()),
           static_cast<std::streamsize>(bytes));
  if (!raw) throw FormatError(msg("short read from ", base, ".raw"));
  const bool file_little = order == "little";
  const bool host_little = std::endian::native == std::endian::little;
  if (file_little != host_little) byteswap_f32(v.voxels);
  return v;
}

std::string prep_path(const std::string& volume_path) {
  const std::string base = base_path(volume_path);
  return base.substr(0, base.size() - 4) + ".prep.vol";
}

namespace {

float percentile(std::vector<float> values, double p) {
  const std::size_t idx = static_cast<std::size_t>(
      std::floor(p / 100.0 * static_cast<double>(values.size() - 1)));
  std::nth_element(values.begin(), values.begin() + static_cast<long>(idx),
                   values.end());
  return values[idx];
}

}  // namespace

std::vector<std::uint8_t> brain_mask(const Volume& v, double tau) {
  v.validate();
  const float lo = percentile(v.voxels, 1.0);
  const float hi = percentile(v.voxels, 99.0);
  const double threshold = lo + tau * (static_cast<double>(hi) - lo);
  std::vector<std::uint8_t> mask(v.size(), 0);
  std::size_t fg = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v.voxels[i] > threshold) {
      mask[i] = 1;
      ++fg;
    }
  }
  if (fg == 0)
    throw Error(msg("empty mask: no voxel above threshold ", threshold));
  return mask;
}

Volume resample_nn(const Volume& v, std::array<std::size_t, 3> target_dims) {
  v.validate();
  for (int i = 0; i < 3; ++i)
    if (target_dims[i] < 1)
      throw ShapeError(msg("resample target dim ", i, " must be >= 1"));

  Volume out;
  out.dims = target_dims;
  for (int i = 0; i < 3; ++i)
    out.spacing[i] = v.spacing[i] * static_cast<double>(v.dims[i]) /
                     static_cast<double>(target_dims[i]);
  out.voxels.resize(out.size());

  // target index t -> source index floor((t+0.5)*D_src/D_tgt), clamped
  std::array<std::vector<std::size_t>, 3> map;
  for (int a = 0; a < 3; ++a) {
    map[a].resize(target_dims[a]);
    for (std::size_t t = 0; t < target_dims[a]; ++t) {
      const double src = std::floor((static_cast<double>(t) + 0.5) *
                                    static_cast<double>(v.dims[a]) /
                                    static_cast<double>(target_dims[a]));
      map[a][t] = std::min(v.dims[a] - 1,
                           static_cast<std::size_t>(std::max(0.0, src)));
    }
  }
  for (std::size_t z = 0; z < target_dims[2]; ++z)
    for (std::size_t y = 0; y < target_dims[1]; ++y)
      for (std::size_t x = 0; x < target_dims[0]; ++x)
        out.at(x, y, z) = v.at(map[0][x], map[1][y], map[2][z]);
  return out;
}

NormalizeResult normalize(const Volume& v, const NormalizationSpec& spec,
                          const std::vector<std::uint8_t>* mask) {
  v.validate();
  std::vector<std::uint8_t> computed;
  if (!mask) {
    computed = brain_mask(v);
    mask = &computed;
  }
  if (mask->size() != v.size())
    throw ShapeError(msg("mask size ", mask->size(), " != voxel count ", v.size()));

  NormalizeResult res;
  res.volume = v;

  auto degenerate = [&](const std::string& why) {
    std::fill(res.volume.voxels.begin(), res.volume.voxels.end(), 0.0f);
    res.degenerate = true;
    res.warning = why;
  };

  switch (spec.mode) {
    case NormMode::ZScorePerImage: {
      double sum = 0.0, sumsq = 0.0;
      std::size_t n = 0;
      for (std::size_t i = 0; i < v.size(); ++i)
        if ((*mask)[i]) {
          sum += v.voxels[i];
          sumsq += static_cast<double>(v.voxels[i]) * v.voxels[i];
          ++n;
        }
      const double mean = sum / static_cast<double>(n);
      const double var = std::max(0.0, sumsq / static_cast<double>(n) - mean * mean);
      const double sd = std::sqrt(var);
      // accumulation rounding can leave a ~1e-7-scale residue on a constant
      // image; anything below this floor is a degenerate image, not signal
      if (sd <= 1e-6 * std::max(1.0, std::abs(mean))) {
        degenerate("degenerate image: zero intensity variance over the mask");
        break;
      }
      for (auto& x : res.volume.voxels)
        x = static_cast<float>((x - mean) / sd);
      break;
    }
    case NormMode::MinMax: {
      float lo = 0, hi = 0;
      bool first = true;
      for (std::size_t i = 0; i < v.size(); ++i)
        if ((*mask)[i]) {
          if (first) {
            lo = hi = v.voxels[i];
            first = false;
          } else {
            lo = std::min(lo, v.voxels[i]);
            hi = std::max(hi, v.voxels[i]);
          }
        }
      if (hi == lo) {
        degenerate("degenerate image: zero intensity range over the mask");
        break;
      }
      const double range = static_cast<double>(hi) - lo;
      for (std::size_t i = 0; i < v.size(); ++i)
        res.volume.voxels[i] =
            (*mask)[i]
                ? static_cast<float>((v.voxels[i] - lo) / range)
                : 0.0f;  // background forced to zero
      break;
    }
    case NormMode::ZScoreGlobal: {
      if (!spec.global)
        throw ConfigError("zscore_global requires dataset statistics "
                          "(mean/stddev with provenance)");
      if (spec.global->stddev <= 0)
        throw ConfigError(msg("zscore_global stddev must be > 0, got ",
                              spec.global->stddev));
      const double mean = spec.global->mean, sd = spec.global->stddev;
      for (auto& x : res.volume.voxels)
        x = static_cast<float>((x - mean) / sd);
      break;
    }
  }
  return res;
}

void GlobalStatsAccumulator::add(const Volume& v, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != v.size())
    throw ShapeError("global stats: mask does not match volume");
  for (std::size_t i = 0; i < v.size(); ++i)
    if (mask[i]) {
      sum += v.voxels[i];
      sumsq += static_cast<double>(v.voxels[i]) * v.voxels[i];
      ++count;
    }
}

GlobalStats GlobalStatsAccumulator::finalize(const std::string& provenance) const {
  if (count == 0) throw Error("global stats: no masked voxels accumulated");
  GlobalStats g;
  g.mean = sum / static_cast<double>(count);
  const double var = std::max(0.0, sumsq / static_cast<double>(count) - g.mean * g.mean);
  g.stddev = std::sqrt(var);
  if (g.stddev == 0.0)
    throw Error("global stats: zero variance over the training split");
  g.provenance = provenance;
  return g;
}

std::vector<std::size_t> select_axial_indices(std::size_t z_count, std::size_t k) {
  if (z_count < k)
    throw Error(msg("cannot select ", k, " axial slices from ", z_count));
  std::vector<std::size_t> idx(k);
  for (std::size_t i = 0; i < k; ++i)
    idx[i] = static_cast<std::size_t>(
        std::floor((static_cast<double>(i) + 0.5) * static_cast<double>(z_count) /
                   static_cast<double>(k)));
  return idx;
}

namespace {

Slice2D axial_slice(const Volume& v, std::size_t z) {
  Slice2D s(v.dims[1], v.dims[0]);
  std::memcpy(s.pix.data(), v.voxels.data() + z * v.dims[0] * v.dims[1],
              v.dims[0] * v.dims[1] * sizeof(float));
  return s;
}

}  // namespace

SliceSet select_axial_slices(const Volume& v, std::size_t k) {
  v.validate();
  SliceSet out;
  out.source_indices = select_axial_indices(v.dims[2], k);
  out.slices.reserve(k);
  for (std::size_t z : out.source_indices) out.slices.push_back(axial_slice(v, z));
  return out;
}

Slice2D make_grid_montage(const SliceSet& s) {
  if (s.slices.size() != 16)
    throw Error(msg("montage requires exactly 16 slices, got ", s.slices.size()));
  const std::size_t h = s.slices[0].h, w = s.slices[0].w;
  for (const auto& sl : s.slices)
    if (sl.h != h || sl.w != w)
      throw ShapeError("montage requires uniformly sized slices");
  Slice2D m(4 * h, 4 * w);
  for (std::size_t k = 0; k < 16; ++k) {
    const std::size_t r0 = (k / 4) * h, c0 = (k % 4) * w;
    for (std::size_t r = 0; r < h; ++r)
      std::memcpy(&m.at(r0 + r, c0), &s.slices[k].pix[r * w], w * sizeof(float));
  }
  return m;
}

SliceSet split_grid_montage(const Slice2D& montage) {
  if (montage.h % 4 != 0 || montage.w % 4 != 0)
    throw ShapeError("montage dimensions must be divisible by 4");
  const std::size_t h = montage.h / 4, w = montage.w / 4;
  SliceSet out;
  for (std::size_t k = 0; k < 16; ++k) {
    Slice2D s(h, w);
    const std::size_t r0 = (k / 4) * h, c0 = (k % 4) * w;
    for (std::size_t r = 0; r < h; ++r)
      std::memcpy(&s.pix[r * w], &montage.at(r0 + r, c0), w * sizeof(float));
    out.slices.push_back(std::move(s));
    out.source_indices.push_back(k);
  }
  return out;
}

Slice2D pad_to(const Slice2D& s, std::size_t h, std::size_t w) {
  if (s.h > h || s.w > w)
    throw ShapeError(msg("cannot pad ", s.h, "x", s.w, " to smaller ", h, "x", w));
  if (s.h == h && s.w == w) return s;
  Slice2D out(h, w);
  const std::size_t r0 = (h - s.h) / 2, c0 = (w - s.w) / 2;
  for (std::size_t r = 0; r < s.h; ++r)
    std::memcpy(&out.at(r0 + r, c0), &s.pix[r * s.w], s.w * sizeof(float));
  return out;
}

PlaneSlices extract_plane_slices(const Volume& v,
                                 std::array<std::size_t, 3> expected_dims) {
  v.validate();
  if (v.dims != expected_dims)
    throw Error(msg("volume is not on the uniform grid: got ", v.dims[0], "x",
                    v.dims[1], "x", v.dims[2], ", expected ", expected_dims[0],
                    "x", expected_dims[1], "x", expected_dims[2]));
  const std::size_t X = v.dims[0], Y = v.dims[1], Z = v.dims[2];
  const std::size_t side = std::max({X, Y, Z});

  PlaneSlices out;
  out.encoder_h = side;
  out.encoder_w = side;

  for (std::size_t z = 0; z < Z; ++z) {
    out.axial.slices.push_back(pad_to(axial_slice(v, z), side, side));
    out.axial.source_indices.push_back(z);
  }
  for (std::size_t y = 0; y < Y; ++y) {
    Slice2D s(Z, X);
    for (std::size_t z = 0; z < Z; ++z)
      for (std::size_t x = 0; x < X; ++x) s.at(z, x) = v.at(x, y, z);
    out.coronal.slices.push_back(pad_to(s, side, side));
    out.coronal.source_indices.push_back(y);
  }
  for (std::size_t x = 0; x < X; ++x) {
    Slice2D s(Z, Y);
    for (std::size_t z = 0; z < Z; ++z)
      for (std::size_t y = 0; y < Y; ++y) s.at(z, y) = v.at(x, y, z);
    out.sagittal.slices.push_back(pad_to(s, side, side));
    out.sagittal.source_indices.push_back(x);
  }
  return out;
}

NormalizeResult preprocess_volume(const Volume& raw, const PreprocessConfig& cfg) {
  Volume resampled = resample_nn(raw, cfg.grid);
  auto mask = brain_mask(resampled, cfg.mask_tau);
  return normalize(resampled, cfg.norm, &mask);
}

}  // namespace adbench::vol
