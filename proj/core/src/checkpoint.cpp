#include "adbench/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

namespace adbench::ckpt {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'A', 'D', 'B', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  U out = 0;
  auto* src = reinterpret_cast<const unsigned char*>(&v);
  auto* dst = reinterpret_cast<unsigned char*>(&out);
  for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
  return out;
}

template <typename U>
void write_scalar(std::ofstream& out, U v) {
  const U le = to_little(v);
  out.write(reinterpret_cast<const char*>(&le), sizeof(U));
}

template <typename U>
U read_scalar(std::ifstream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("checkpoint: truncated file");
  return to_little(v);
}

void write_string(std::ofstream& out, const std::string& s) {
  write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::ifstream& in) {
  const auto n = read_scalar<std::uint32_t>(in);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw FormatError("checkpoint: truncated string");
  return s;
}

void write_floats(std::ofstream& out, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(n * 4));
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &data[i], 4);
      write_scalar<std::uint32_t>(out, u);
    }
  }
}

void read_floats(std::ifstream& in, float* data, std::size_t n) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
  if (!in) throw FormatError("checkpoint: truncated block data");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u;
      std::memcpy(&u, &data[i], 4);
      u = to_little(u);
      std::memcpy(&data[i], &u, 4);
    }
  }
}

struct Block {
  std::string name;
  std::vector<std::size_t> shape;
  const float* data;
  std::size_t count;
};

void save_blocks(const std::string& path, const CheckpointMeta& meta,
                 const std::vector<Block>& blocks) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(msg("cannot write checkpoint ", path));
  out.write(kMagic, 4);
  write_scalar<std::uint32_t>(out, kVersion);
  write_string(out, meta.model_id);
  write_string(out, meta.config_hash);
  write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(blocks.size()));
  for (const auto& b : blocks) {
    write_string(out, b.name);
    write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
    for (auto d : b.shape) write_scalar<std::uint64_t>(out, d);
    write_floats(out, b.data, b.count);
  }
  if (!out) throw FormatError(msg("short write to checkpoint ", path));

  json manifest;
  manifest["format_version"] = kVersion;
  manifest["model_id"] = meta.model_id;
  manifest["config_hash"] = meta.config_hash;
  if (!meta.model_config_json.empty())
    manifest["model_config"] = json::parse(meta.model_config_json);
  json jblocks = json::array();
  for (const auto& b : blocks) {
    json jb;
    jb["name"] = b.name;
    jb["shape"] = b.shape;
    jb["count"] = b.count;
    jblocks.push_back(jb);
  }
  manifest["blocks"] = jblocks;
  std::ofstream side(path + ".json");
  if (!side) throw FormatError(msg("cannot write checkpoint manifest ", path, ".json"));
  side << manifest.dump(2) << "\n";
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<nn::NamedParam<float>>& params,
                     const std::vector<nn::NamedBuffer<float>>& buffers) {
  std::vector<Block> blocks;
  blocks.reserve(params.size() + buffers.size());
  for (const auto& p : params)
    blocks.push_back({p.name, p.tensor.shape(), p.tensor.data(), p.tensor.size()});
  for (const auto& b : buffers)
    blocks.push_back({b.name, {b.data->size()}, b.data->data(), b.data->size()});
  save_blocks(path, meta, blocks);
}

CheckpointMeta load_checkpoint(const std::string& path,
                               std::vector<nn::NamedParam<float>>& params,
                               std::vector<nn::NamedBuffer<float>>& buffers) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(msg("cannot open checkpoint ", path));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(msg("not a checkpoint file: ", path));
  CheckpointMeta meta;
  meta.format_version = read_scalar<std::uint32_t>(in);
  if (meta.format_version != kVersion)
    throw FormatError(msg("unsupported checkpoint version ", meta.format_version));
  meta.model_id = read_string(in);
  meta.config_hash = read_string(in);
  const auto block_count = read_scalar<std::uint32_t>(in);

  struct Loaded {
    std::vector<std::size_t> shape;
    std::vector<float> data;
  };
  std::map<std::string, Loaded> loaded;
  for (std::uint32_t i = 0; i < block_count; ++i) {
    const std::string name = read_string(in);
    const auto ndim = read_scalar<std::uint32_t>(in);
    Loaded blk;
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      blk.shape.push_back(static_cast<std::size_t>(read_scalar<std::uint64_t>(in)));
      count *= blk.shape.back();
    }
    blk.data.resize(count);
    read_floats(in, blk.data.data(), count);
    loaded.emplace(name, std::move(blk));
  }

  for (auto& p : params) {
    auto it = loaded.find(p.name);
    if (it == loaded.end())
      throw FormatError(msg("checkpoint ", path, " is missing block '", p.name, "'"));
    if (it->second.shape != p.tensor.shape())
      throw FormatError(msg("checkpoint block '", p.name, "' has shape ",
                            shape_str(it->second.shape), ", expected ",
                            shape_str(p.tensor.shape())));
    std::copy(it->second.data.begin(), it->second.data.end(), p.tensor.data());
  }
  for (auto& b : buffers) {
    auto it = loaded.find(b.name);
    if (it == loaded.end())
      throw FormatError(msg("checkpoint ", path, " is missing block '", b.name, "'"));
    if (it->second.data.size() != b.data->size())
      throw FormatError(msg("checkpoint block '", b.name, "' has ",
                            it->second.data.size(), " values, expected ",
                            b.data->size()));
    *b.data = it->second.data;
  }
  return meta;
}

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(msg("cannot open checkpoint ", path));
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError(msg("not a checkpoint file: ", path));
  CheckpointMeta meta;
  meta.format_version = read_scalar<std::uint32_t>(in);
  meta.model_id = read_string(in);
  meta.config_hash = read_string(in);

  std::ifstream side(path + ".json");
  if (side) {
    json manifest;
    try {
      side >> manifest;
      if (manifest.contains("model_config"))
        meta.model_config_json = manifest["model_config"].dump();
    } catch (const json::exception&) {
      // manifest is advisory; the binary header is authoritative
    }
  }
  return meta;
}

std::uint64_t file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(msg("cannot open ", path));
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  }
  return h;
}

}  // namespace adbench::ckpt
