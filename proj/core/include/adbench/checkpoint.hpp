#pragma once

// Checkpoint file: fixed header (format version, model id, config hash)
// followed by named parameter blocks stored as little-endian 32-bit floats
// with shape metadata, plus a JSON manifest sidecar (`<file>.json`).

#include <cstdint>
#include <string>
#include <vector>

#include "adbench/nn.hpp"

namespace adbench::ckpt {

struct CheckpointMeta {
  std::uint32_t format_version = 1;
  std::string model_id;
  std::string config_hash;
  // full model config JSON, stored in the sidecar so checkpoints are
  // self-describing
  std::string model_config_json;
};

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const std::vector<nn::NamedParam<float>>& params,
                     const std::vector<nn::NamedBuffer<float>>& buffers);

// Loads blocks into the given tensors/buffers by name; every destination
// must be present in the file with a matching shape.
CheckpointMeta load_checkpoint(const std::string& path,
                               std::vector<nn::NamedParam<float>>& params,
                               std::vector<nn::NamedBuffer<float>>& buffers);

CheckpointMeta read_checkpoint_meta(const std::string& path);

// FNV-1a over the full file contents; used to assert that evaluation never
// mutates parameters.
std::uint64_t file_checksum(const std::string& path);

}  // namespace adbench::ckpt
