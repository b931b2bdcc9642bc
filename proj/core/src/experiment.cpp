#include "adbench/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adbench/metrics.hpp"

namespace adbench::exp {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::validate() const {
  if (train_manifest.empty()) throw ConfigError("config.train_manifest: missing");
  model.validate();
  tc.validate();
  if (folds < 2) throw ConfigError(msg("config.folds: must be >= 2, got ", folds));
  if (labeling == cohort::Labeling::Visit953 && model.num_classes != 2)
    throw ConfigError("config.model.num_classes: visit953 labeling is binary");
  if (labeling == cohort::Labeling::Last && model.num_classes != 3)
    throw ConfigError("config.model.num_classes: last labeling has three classes");
  for (int i = 0; i < 3; ++i)
    if (grid[static_cast<std::size_t>(i)] < 1)
      throw ConfigError("config.grid: entries must be >= 1");
  if (static_cast<int>(grid[2]) < model.slices)
    throw ConfigError(msg("config.grid: axial extent ", grid[2],
                          " smaller than model slice count ", model.slices));
}

namespace {

template <typename T>
T get_field(const json& j, const std::string& path, const std::string& key,
            const T& fallback, bool required = false) {
  if (!j.contains(key)) {
    if (required)
      throw ConfigError(msg(path, ".", key, ": required field missing"));
    return fallback;
  }
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(msg(path, ".", key, ": wrong type"));
  }
}

}  // namespace

ExperimentConfig parse_experiment_config(const std::string& json_text,
                                         const std::string& origin) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(msg(origin, ": malformed JSON: ", e.what()));
  }

  ExperimentConfig cfg;
  cfg.name = get_field<std::string>(j, origin, "name", cfg.name);
  cfg.train_manifest =
      get_field<std::string>(j, origin, "train_manifest", "", /*required=*/true);
  cfg.out_dir = get_field<std::string>(j, origin, "out_dir", cfg.out_dir);
  cfg.folds = get_field<int>(j, origin, "folds", cfg.folds);

  if (j.contains("grid")) {
    if (!j["grid"].is_array() || j["grid"].size() != 3)
      throw ConfigError(msg(origin, ".grid: expected [X,Y,Z]"));
    for (int i = 0; i < 3; ++i)
      cfg.grid[static_cast<std::size_t>(i)] =
          j["grid"][static_cast<std::size_t>(i)].get<std::size_t>();
  }

  try {
    cfg.labeling = cohort::parse_labeling(
        get_field<std::string>(j, origin, "labeling", "visit953"));
  } catch (const ConfigError& e) {
    throw ConfigError(msg(origin, ".labeling: ", e.what()));
  }
  try {
    cfg.normalization = vol::parse_norm_mode(
        get_field<std::string>(j, origin, "normalization", "zscore_per_image"));
  } catch (const ConfigError& e) {
    throw ConfigError(msg(origin, ".normalization: ", e.what()));
  }
  try {
    cfg.selection = cohort::parse_selection(
        get_field<std::string>(j, origin, "selection", "first"));
  } catch (const ConfigError& e) {
    throw ConfigError(msg(origin, ".selection: ", e.what()));
  }

  if (j.contains("externals")) {
    if (!j["externals"].is_array())
      throw ConfigError(msg(origin, ".externals: expected an array"));
    for (std::size_t i = 0; i < j["externals"].size(); ++i) {
      const json& e = j["externals"][i];
      ExternalCohort ext;
      ext.name = get_field<std::string>(e, msg(origin, ".externals[", i, "]"),
                                        "name", "", true);
      ext.manifest = get_field<std::string>(
          e, msg(origin, ".externals[", i, "]"), "manifest", "", true);
      cfg.externals.push_back(std::move(ext));
    }
  }

  const std::string mpath = origin + ".model";
  json jm = j.contains("model") ? j["model"] : json::object();
  try {
    cfg.model.kind =
        models::parse_model_kind(get_field<std::string>(jm, mpath, "kind",
                                                        "pruned_resnet"));
  } catch (const ConfigError& e) {
    throw ConfigError(msg(mpath, ".kind: ", e.what()));
  }
  cfg.model.num_classes = get_field<int>(jm, mpath, "classes",
                                         cfg.labeling == cohort::Labeling::Last ? 3 : 2);
  cfg.model.slices = get_field<int>(jm, mpath, "slices", 16);
  cfg.model.dropout = get_field<double>(
      jm, mpath, "dropout",
      cfg.model.kind == models::ModelKind::InceptionGrid ? 0.6 : 0.4);
  cfg.model.width_mult = get_field<double>(jm, mpath, "width_mult", 1.0);
  cfg.model.token_dim = get_field<int>(jm, mpath, "token_dim", 64);
  cfg.model.heads = get_field<int>(jm, mpath, "heads", 4);
  cfg.model.transformer_layers = get_field<int>(jm, mpath, "transformer_layers", 1);

  const std::string tpath = origin + ".train";
  json jt = j.contains("train") ? j["train"] : json::object();
  cfg.tc = train::default_train_config(cfg.model.kind);
  cfg.tc.lr = get_field<double>(jt, tpath, "lr", cfg.tc.lr);
  cfg.tc.batch_size = get_field<int>(jt, tpath, "batch_size", cfg.tc.batch_size);
  cfg.tc.max_epochs = get_field<int>(jt, tpath, "max_epochs", cfg.tc.max_epochs);
  cfg.tc.patience = get_field<int>(jt, tpath, "patience", cfg.tc.patience);
  cfg.tc.seed = get_field<std::uint64_t>(jt, tpath, "seed", cfg.tc.seed);
  cfg.tc.weighted_loss = get_field<bool>(jt, tpath, "weighted_loss", true);
  const std::string apath = tpath + ".augment";
  json ja = jt.contains("augment") ? jt["augment"] : json::object();
  cfg.tc.augment.enabled = get_field<bool>(ja, apath, "enabled", true);
  cfg.tc.augment.rotate_deg = get_field<double>(ja, apath, "rotate_deg", 10.0);
  cfg.tc.augment.flip_prob = get_field<double>(ja, apath, "flip_prob", 0.5);
  cfg.tc.augment.intensity_jitter =
      get_field<double>(ja, apath, "intensity_jitter", 0.1);
  cfg.tc.augment.noise_sigma = get_field<double>(ja, apath, "noise_sigma", 0.05);

  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(msg(origin, ": ", e.what()));
  }
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(msg("cannot open config ", path));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_experiment_config(ss.str(), path);
}

namespace {

json config_to_json(const ExperimentConfig& cfg) {
  json j;
  j["name"] = cfg.name;
  j["train_manifest"] = cfg.train_manifest;
  j["labeling"] = cohort::to_string(cfg.labeling);
  j["normalization"] = vol::to_string(cfg.normalization);
  j["selection"] = cohort::to_string(cfg.selection);
  j["grid"] = {cfg.grid[0], cfg.grid[1], cfg.grid[2]};
  j["folds"] = cfg.folds;
  json ext = json::array();
  for (const auto& e : cfg.externals) ext.push_back({{"name", e.name},
                                                     {"manifest", e.manifest}});
  j["externals"] = ext;
  j["model"] = {{"kind", models::to_string(cfg.model.kind)},
                {"classes", cfg.model.num_classes},
                {"slices", cfg.model.slices},
                {"dropout", cfg.model.dropout},
                {"width_mult", cfg.model.width_mult},
                {"token_dim", cfg.model.token_dim},
                {"heads", cfg.model.heads},
                {"transformer_layers", cfg.model.transformer_layers}};
  j["train"] = {{"lr", cfg.tc.lr},
                {"batch_size", cfg.tc.batch_size},
                {"max_epochs", cfg.tc.max_epochs},
                {"patience", cfg.tc.patience},
                {"seed", cfg.tc.seed},
                {"weighted_loss", cfg.tc.weighted_loss},
                {"augment",
                 {{"enabled", cfg.tc.augment.enabled},
                  {"rotate_deg", cfg.tc.augment.rotate_deg},
                  {"flip_prob", cfg.tc.augment.flip_prob},
                  {"intensity_jitter", cfg.tc.augment.intensity_jitter},
                  {"noise_sigma", cfg.tc.augment.noise_sigma}}}};
  return j;
}

}  // namespace

std::string config_hash(const ExperimentConfig& cfg) {
  // nlohmann objects keep sorted keys, so dump() is canonical
  return hex64(fnv1a64(config_to_json(cfg).dump()));
}

std::string ExperimentRecord::unique_key() const {
  return model + "|" + labeling + "|" + std::to_string(slices) + "|" +
         normalization + "|" + selection + "|" + std::to_string(fold) + "|" + split;
}

static const char* kResultsHeader =
    "model,labeling,classes,slices,normalization,selection,fold,split,auc,"
    "accuracy,sensitivity,specificity,best_epoch,seed,config_hash,timestamp";

std::vector<ExperimentRecord> load_records(const std::string& csv_path) {
  std::vector<ExperimentRecord> out;
  std::ifstream in(csv_path);
  if (!in) return out;
  std::string line;
  if (!std::getline(in, line)) return out;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kResultsHeader)
    throw FormatError(msg("results file ", csv_path, " has unexpected header"));
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (f.size() != 16)
      throw FormatError(msg("results file ", csv_path, ": bad row '", line, "'"));
    ExperimentRecord r;
    r.model = f[0];
    r.labeling = f[1];
    r.classes = std::stoi(f[2]);
    r.slices = std::stoi(f[3]);
    r.normalization = f[4];
    r.selection = f[5];
    r.fold = std::stoi(f[6]);
    r.split = f[7];
    r.auc = std::stod(f[8]);
    r.accuracy = std::stod(f[9]);
    r.sensitivity = std::stod(f[10]);
    r.specificity = std::stod(f[11]);
    r.best_epoch = std::stoi(f[12]);
    r.seed = std::stoull(f[13]);
    r.config_hash = f[14];
    r.timestamp = f[15];
    out.push_back(std::move(r));
  }
  return out;
}

namespace {

void write_record_row(std::ofstream& out, const ExperimentRecord& r) {
  char nums[160];
  std::snprintf(nums, sizeof(nums), "%.6f,%.6f,%.6f,%.6f", r.auc, r.accuracy,
                r.sensitivity, r.specificity);
  out << r.model << "," << r.labeling << "," << r.classes << "," << r.slices
      << "," << r.normalization << "," << r.selection << "," << r.fold << ","
      << r.split << "," << nums << "," << r.best_epoch << "," << r.seed << ","
      << r.config_hash << "," << r.timestamp << "\n";
}

}  // namespace

void append_records(const std::string& csv_path,
                    const std::vector<ExperimentRecord>& records) {
  const auto existing = load_records(csv_path);
  std::set<std::string> keys;
  for (const auto& r : existing) keys.insert(r.unique_key());
  for (const auto& r : records) {
    if (!keys.insert(r.unique_key()).second)
      throw Error(msg("results file ", csv_path,
                      " already contains a row for key '", r.unique_key(),
                      "'; use --force to replace the configuration or a fresh "
                      "out_dir"));
  }
  const bool fresh = existing.empty() && !fs::exists(csv_path);
  std::ofstream out(csv_path, std::ios::app);
  if (!out) throw FormatError(msg("cannot write results file ", csv_path));
  if (fresh) out << kResultsHeader << "\n";
  for (const auto& r : records) write_record_row(out, r);
}

void remove_records_by_hash(const std::string& csv_path,
                            const std::vector<std::string>& hashes) {
  if (!fs::exists(csv_path)) return;
  const auto existing = load_records(csv_path);
  std::set<std::string> drop(hashes.begin(), hashes.end());
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw FormatError(msg("cannot rewrite results file ", csv_path));
  out << kResultsHeader << "\n";
  for (const auto& r : existing)
    if (!drop.count(r.config_hash)) write_record_row(out, r);
}

std::string iso_timestamp_utc() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

RunOutcome run_experiment(const ExperimentConfig& cfg, bool force) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  const std::string results_path = (fs::path(cfg.out_dir) / "results.csv").string();
  const std::string hash = config_hash(cfg);

  RunOutcome outcome;
  {
    const auto existing = load_records(results_path);
    const bool present = std::any_of(existing.begin(), existing.end(),
                                     [&](const ExperimentRecord& r) {
                                       return r.config_hash == hash;
                                     });
    if (present) {
      if (!force) {
        outcome.skipped = true;
        return outcome;
      }
      remove_records_by_hash(results_path, {hash});
    }
  }

  // label + split
  const auto visits = cohort::load_manifest(cfg.train_manifest);
  const std::string manifest_dir = fs::path(cfg.train_manifest).parent_path().string();
  cohort::LabelingOutcome labeled = cohort::apply_labeling(visits, cfg.labeling);
  cohort::write_audit_log(labeled.audit_lines,
                          (fs::path(cfg.out_dir) / (cfg.name + ".audit.jsonl")).string());

  std::map<std::string, int> subject_label;
  for (const auto& s : labeled.samples) subject_label[s.subject_id] = s.label;
  std::vector<std::pair<std::string, int>> subjects(subject_label.begin(),
                                                    subject_label.end());
  cohort::SplitPlan plan =
      cohort::stratified_subject_kfold(subjects, cfg.folds, cfg.tc.seed);

  train::DataCache cache(manifest_dir, cfg.grid);
  train::TrainContext ctx;
  ctx.cache = &cache;
  ctx.norm.mode = cfg.normalization;
  ctx.slices = cfg.model.slices;
  ctx.num_classes = cfg.model.num_classes;
  ctx.positive_class = labeled.positive_class;

  // external cohorts with their own caches (geometry differs)
  struct External {
    std::string name;
    std::vector<cohort::LabeledSample> samples;
    std::unique_ptr<train::DataCache> cache;
  };
  std::vector<External> externals;
  for (const auto& e : cfg.externals) {
    External ext;
    ext.name = e.name;
    const auto evisits = cohort::load_manifest(e.manifest);
    ext.samples = train::label_external(evisits, cfg.model.num_classes);
    ext.cache = std::make_unique<train::DataCache>(
        fs::path(e.manifest).parent_path().string(), cfg.grid);
    externals.push_back(std::move(ext));
  }

  auto base_record = [&]() {
    ExperimentRecord r;
    r.model = models::to_string(cfg.model.kind);
    r.labeling = cohort::to_string(cfg.labeling);
    r.classes = cfg.model.num_classes;
    r.slices = cfg.model.slices;
    r.normalization = vol::to_string(cfg.normalization);
    r.selection = cohort::to_string(cfg.selection);
    r.seed = cfg.tc.seed;
    r.config_hash = hash;
    r.timestamp = iso_timestamp_utc();
    return r;
  };

  train::FoldHook hook = [&](int fold, models::Model<float>& model,
                             const train::FoldResult& fr,
                             const train::TrainContext& fold_ctx) {
    std::vector<ExperimentRecord> rows;
    ExperimentRecord r = base_record();
    r.fold = fold;
    r.split = "adni_test";
    r.auc = fr.test.auc;
    r.accuracy = fr.test.accuracy;
    r.sensitivity = fr.test.sensitivity;
    r.specificity = fr.test.specificity;
    r.best_epoch = fr.best_epoch;
    rows.push_back(r);

    for (auto& ext : externals) {
      train::TrainContext ext_ctx = fold_ctx;  // carries fold global stats
      ext_ctx.cache = ext.cache.get();
      const train::SplitMetrics m =
          train::evaluate_split(model, ext.samples, ext_ctx);
      ExperimentRecord er = base_record();
      er.fold = fold;
      er.split = "external_" + ext.name;
      er.auc = m.auc;
      er.accuracy = m.accuracy;
      er.sensitivity = m.sensitivity;
      er.specificity = m.specificity;
      er.best_epoch = fr.best_epoch;
      rows.push_back(er);
    }
    // persist per fold so partial results survive failures
    append_records(results_path, rows);
    for (auto& row : rows) outcome.records.push_back(std::move(row));
  };

  train::cross_validate(cfg.model, labeled, plan, cfg.selection, ctx, cfg.tc,
                        cfg.out_dir, hash, hook);
  return outcome;
}

AblationOutcome run_ablation(const std::string& grid_json_path, bool force) {
  std::ifstream in(grid_json_path);
  if (!in) throw ConfigError(msg("cannot open ablation grid ", grid_json_path));
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError(msg(grid_json_path, ": malformed JSON: ", e.what()));
  }
  if (!j.contains("base"))
    throw ConfigError(msg(grid_json_path, ": missing 'base' experiment config"));
  if (!j.contains("axes") || !j["axes"].is_object() || j["axes"].empty())
    throw ConfigError(msg(grid_json_path, ": empty ablation grid"));

  auto axis = [&](const char* name, std::vector<std::string> fallback) {
    if (!j["axes"].contains(name)) return fallback;
    std::vector<std::string> vals;
    for (const auto& v : j["axes"][name]) {
      if (v.is_number_integer())
        vals.push_back(std::to_string(v.get<int>()));
      else
        vals.push_back(v.get<std::string>());
    }
    if (vals.empty()) throw ConfigError(msg(grid_json_path, ": axis '", name,
                                            "' is empty"));
    return vals;
  };

  const auto model_axis = axis("model", {"pruned_resnet"});
  const auto labeling_axis = axis("labeling", {"visit953"});
  const auto slices_axis = axis("slices", {"16"});
  const auto norm_axis = axis("normalization", {"zscore_per_image"});
  const auto sel_axis = axis("selection", {"first"});

  AblationOutcome outcome;
  for (const auto& model_name : model_axis)
    for (const auto& labeling_name : labeling_axis)
      for (const auto& slices_str : slices_axis)
        for (const auto& norm_name : norm_axis)
          for (const auto& sel_name : sel_axis) {
            const std::string combo =
                msg(model_name, " x ", labeling_name, " x ", slices_str, " x ",
                    norm_name, " x ", sel_name);
            json base = j["base"];
            base["labeling"] = labeling_name;
            base["normalization"] = norm_name;
            base["selection"] = sel_name;
            if (!base.contains("model")) base["model"] = json::object();
            base["model"]["kind"] = model_name;
            base["model"]["slices"] = std::stoi(slices_str);
            base["model"]["classes"] = labeling_name == "last" ? 3 : 2;
            base["name"] = msg(model_name, "_", labeling_name, "_s", slices_str,
                               "_", norm_name, "_", sel_name);
            ExperimentConfig cfg;
            try {
              cfg = parse_experiment_config(base.dump(), grid_json_path);
            } catch (const ConfigError& e) {
              outcome.skipped.push_back(msg(combo, ": ", e.what()));
              continue;
            }
            RunOutcome run = run_experiment(cfg, force);
            ++outcome.executed;
            if (run.skipped) {
              // idempotent skip: pull the existing rows for the summary
              const auto rows = load_records(
                  (fs::path(cfg.out_dir) / "results.csv").string());
              const std::string h = config_hash(cfg);
              for (const auto& r : rows)
                if (r.config_hash == h) outcome.records.push_back(r);
            } else {
              outcome.records.insert(outcome.records.end(), run.records.begin(),
                                     run.records.end());
            }
          }
  return outcome;
}

std::string render_results_table(const std::vector<ExperimentRecord>& records) {
  struct Group {
    std::map<std::string, std::vector<double>> auc_by_split;
  };
  std::map<std::string, Group> groups;
  std::set<std::string> splits;
  for (const auto& r : records) {
    const std::string gkey = r.model + "|" + r.labeling + "|" +
                             std::to_string(r.classes) + "|" +
                             std::to_string(r.slices) + "|" + r.normalization +
                             "|" + r.selection;
    groups[gkey].auc_by_split[r.split].push_back(r.auc);
    splits.insert(r.split);
  }
  std::vector<std::string> split_cols(splits.begin(), splits.end());
  // adni_test leads, externals follow alphabetically
  std::stable_sort(split_cols.begin(), split_cols.end(),
                   [](const std::string& a, const std::string& b) {
                     const bool ia = a == "adni_test", ib = b == "adni_test";
                     if (ia != ib) return ia;
                     return a < b;
                   });

  std::ostringstream os;
  os << "| Model | Labeling | Classes | Slices | Normalization | Selection |";
  for (const auto& s : split_cols) os << " " << s << " |";
  os << "\n|---|---|---|---|---|---|";
  for (std::size_t i = 0; i < split_cols.size(); ++i) os << "---|";
  os << "\n";
  for (const auto& [gkey, group] : groups) {
    std::vector<std::string> parts;
    std::stringstream ss(gkey);
    std::string part;
    while (std::getline(ss, part, '|')) parts.push_back(part);
    os << "| " << parts[0] << " | " << parts[1] << " | " << parts[2] << " | "
       << parts[3] << " | " << parts[4] << " | " << parts[5] << " |";
    for (const auto& s : split_cols) {
      auto it = group.auc_by_split.find(s);
      if (it == group.auc_by_split.end()) {
        os << " - |";
      } else {
        os << " " << metrics::format_mean_std(metrics::aggregate_folds(it->second))
           << " |";
      }
    }
    os << "\n";
  }
  return os.str();
}

}  // namespace adbench::exp
