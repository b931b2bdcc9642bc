#include "adbench/models.hpp"

#include <sstream>

#include <json.hpp>

namespace adbench::models {

ModelKind parse_model_kind(const std::string& name) {
  if (name == "inception_grid" || name == "inception") return ModelKind::InceptionGrid;
  if (name == "plane_transformer" || name == "transformer")
    return ModelKind::PlaneTransformer;
  if (name == "pruned_resnet" || name == "presnet") return ModelKind::PrunedResNet;
  throw ConfigError(msg("unknown model kind '", name,
                        "' (expected inception_grid, plane_transformer or "
                        "pruned_resnet)"));
}

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::InceptionGrid: return "inception_grid";
    case ModelKind::PlaneTransformer: return "plane_transformer";
    case ModelKind::PrunedResNet: return "pruned_resnet";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (num_classes != 2 && num_classes != 3)
    throw ConfigError(msg("model num_classes must be 2 or 3, got ", num_classes));
  if (slices != 16 && slices != 77)
    throw ConfigError(msg("model slices must be 16 or 77, got ", slices));
  if (kind != ModelKind::PlaneTransformer && slices != 16)
    throw ConfigError(msg(to_string(kind), " requires slices = 16, got ", slices));
  if (!(dropout >= 0.0 && dropout < 1.0))
    throw ConfigError(msg("dropout must be in [0,1), got ", dropout));
  if (!(width_mult > 0.0))
    throw ConfigError(msg("width_mult must be > 0, got ", width_mult));
  if (token_dim < 1 || heads < 1 || token_dim % heads != 0)
    throw ConfigError(msg("token_dim ", token_dim, " must be divisible by heads ",
                          heads));
  if (transformer_layers < 1)
    throw ConfigError("transformer_layers must be >= 1");
}

std::string model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json j;
  j["kind"] = to_string(cfg.kind);
  j["classes"] = cfg.num_classes;
  j["slices"] = cfg.slices;
  j["dropout"] = cfg.dropout;
  j["width_mult"] = cfg.width_mult;
  j["token_dim"] = cfg.token_dim;
  j["heads"] = cfg.heads;
  j["transformer_layers"] = cfg.transformer_layers;
  j["init_seed"] = cfg.init_seed;
  return j.dump();
}

ModelConfig model_config_from_json(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(msg("model config: malformed JSON: ", e.what()));
  }
  ModelConfig cfg;
  if (j.contains("kind")) cfg.kind = parse_model_kind(j["kind"].get<std::string>());
  if (j.contains("classes")) cfg.num_classes = j["classes"].get<int>();
  if (j.contains("slices")) cfg.slices = j["slices"].get<int>();
  if (j.contains("dropout")) cfg.dropout = j["dropout"].get<double>();
  if (j.contains("width_mult")) cfg.width_mult = j["width_mult"].get<double>();
  if (j.contains("token_dim")) cfg.token_dim = j["token_dim"].get<int>();
  if (j.contains("heads")) cfg.heads = j["heads"].get<int>();
  if (j.contains("transformer_layers"))
    cfg.transformer_layers = j["transformer_layers"].get<int>();
  if (j.contains("init_seed")) cfg.init_seed = j["init_seed"].get<std::uint64_t>();
  cfg.validate();
  return cfg;
}

std::string describe(const std::vector<std::pair<std::string, std::size_t>>& table) {
  std::ostringstream os;
  std::size_t total = 0;
  std::size_t width = 12;
  for (const auto& [name, count] : table) width = std::max(width, name.size());
  for (const auto& [name, count] : table) {
    os << name << std::string(width + 2 - name.size(), ' ') << count << "\n";
    total += count;
  }
  os << "total" << std::string(width + 2 - 5, ' ') << total << "\n";
  return os.str();
}

}  // namespace adbench::models
