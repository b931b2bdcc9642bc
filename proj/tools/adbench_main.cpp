// adbench command line: synthesize phantom cohorts, preprocess volumes,
// run cross-validated experiments, sweep the ablation grid, compute
// occlusion maps, and render result tables.
//
// Set ADBENCH_STRICT=1 to pin kernels to bit-reproducible single-threaded
// execution.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "adbench/checkpoint.hpp"
#include "adbench/cohort.hpp"
#include "adbench/experiment.hpp"
#include "adbench/metrics.hpp"
#include "adbench/models.hpp"
#include "adbench/occlusion.hpp"
#include "adbench/synth.hpp"
#include "adbench/train.hpp"
#include "adbench/volume.hpp"

namespace fs = std::filesystem;
using namespace adbench;

namespace {

int cmd_synth(const std::string& cohort_name, bool small, std::size_t count,
              std::uint64_t seed, const std::string& out_dir, double scale,
              double offset, double noise, const std::string& spec_json) {
  synth::CohortSpec spec;
  if (cohort_name == "adni-like")
    spec = synth::adni_like_spec(small);
  else if (cohort_name == "fleni-like")
    spec = synth::fleni_like_spec(small);
  else
    throw ConfigError(msg("unknown cohort preset '", cohort_name,
                          "' (expected adni-like or fleni-like)"));
  spec.subjects = count;
  if (scale > 0) spec.intensity_scale = scale;
  spec.intensity_offset = offset;
  if (noise >= 0) spec.noise_sigma = noise;
  if (!spec_json.empty()) {
    std::ifstream in(spec_json);
    if (!in) throw ConfigError(msg("cannot open spec override ", spec_json));
    nlohmann::json j;
    in >> j;
    if (j.contains("dims"))
      for (int i = 0; i < 3; ++i) spec.dims[i] = j["dims"][i].get<std::size_t>();
    if (j.contains("spacing"))
      for (int i = 0; i < 3; ++i) spec.spacing[i] = j["spacing"][i].get<double>();
    if (j.contains("mixture"))
      for (int i = 0; i < 3; ++i) spec.mixture[i] = j["mixture"][i].get<double>();
    if (j.contains("noise_sigma")) spec.noise_sigma = j["noise_sigma"].get<double>();
    if (j.contains("intensity_scale"))
      spec.intensity_scale = j["intensity_scale"].get<double>();
    if (j.contains("intensity_offset"))
      spec.intensity_offset = j["intensity_offset"].get<double>();
    if (j.contains("longitudinal")) spec.longitudinal = j["longitudinal"].get<bool>();
  }

  const auto manifest = synth::generate_cohort(spec, seed, out_dir);
  std::map<std::string, int> class_counts;
  std::map<std::string, bool> subjects;
  for (const auto& v : manifest) {
    subjects[v.subject_id] = true;
    ++class_counts[cohort::to_string(v.diagnosis)];
  }
  std::cout << "cohort " << spec.name << ": " << subjects.size() << " subjects, "
            << manifest.size() << " scans -> " << out_dir << "\n";
  std::cout << "scan diagnosis mix:";
  for (const auto& [dx, n] : class_counts) std::cout << " " << dx << "=" << n;
  std::cout << "\n";
  return 0;
}

int cmd_preprocess(const std::string& manifest_path, const std::string& norm_name,
                   std::vector<std::size_t> grid, const std::string& stats_in,
                   const std::string& stats_out) {
  vol::PreprocessConfig pcfg;
  if (grid.size() == 3) pcfg.grid = {grid[0], grid[1], grid[2]};
  pcfg.norm.mode = vol::parse_norm_mode(norm_name);

  const auto visits = cohort::load_manifest(manifest_path);
  const fs::path root = fs::path(manifest_path).parent_path();

  if (pcfg.norm.mode == vol::NormMode::ZScoreGlobal) {
    if (!stats_in.empty()) {
      std::ifstream in(stats_in);
      if (!in) throw ConfigError(msg("cannot open stats file ", stats_in));
      nlohmann::json j;
      in >> j;
      vol::GlobalStats g;
      g.mean = j.at("mean").get<double>();
      g.stddev = j.at("stddev").get<double>();
      g.provenance = j.value("provenance", stats_in);
      pcfg.norm.global = g;
    } else {
      // treat the given manifest as the training split
      vol::GlobalStatsAccumulator acc;
      for (const auto& v : visits) {
        vol::Volume r = vol::resample_nn(vol::load_volume((root / v.volume_path).string()),
                                         pcfg.grid);
        acc.add(r, vol::brain_mask(r, pcfg.mask_tau));
      }
      pcfg.norm.global = acc.finalize(msg("manifest ", manifest_path));
      if (!stats_out.empty()) {
        nlohmann::json j;
        j["mean"] = pcfg.norm.global->mean;
        j["stddev"] = pcfg.norm.global->stddev;
        j["provenance"] = pcfg.norm.global->provenance;
        std::ofstream out(stats_out);
        out << j.dump(2) << "\n";
      }
    }
  }

  std::size_t degenerate = 0;
  for (const auto& v : visits) {
    const std::string src = (root / v.volume_path).string();
    vol::NormalizeResult res = vol::preprocess_volume(vol::load_volume(src), pcfg);
    if (res.degenerate) {
      ++degenerate;
      std::cerr << "warning: " << v.scan_id << ": " << res.warning << "\n";
    }
    vol::save_preprocessed(res.volume, vol::prep_path(src), pcfg.norm);
  }
  std::cout << "preprocessed " << visits.size() << " volumes ("
            << vol::to_string(pcfg.norm.mode) << ", grid " << pcfg.grid[0] << "x"
            << pcfg.grid[1] << "x" << pcfg.grid[2] << ")";
  if (degenerate) std::cout << ", " << degenerate << " degenerate";
  std::cout << "\n";
  return 0;
}

int cmd_run(const std::string& config_path, bool force) {
  const exp::ExperimentConfig cfg = exp::load_experiment_config(config_path);
  const exp::RunOutcome outcome = exp::run_experiment(cfg, force);
  if (outcome.skipped) {
    std::cout << "config " << exp::config_hash(cfg)
              << " already present in results; skipped (use --force to re-run)\n";
    return 0;
  }
  std::cout << "wrote " << outcome.records.size() << " records to "
            << (fs::path(cfg.out_dir) / "results.csv").string() << "\n";
  const auto rows = exp::load_records((fs::path(cfg.out_dir) / "results.csv").string());
  std::cout << exp::render_results_table(outcome.records);
  return 0;
}

int cmd_ablate(const std::string& grid_path, bool force, const std::string& table_out) {
  const exp::AblationOutcome outcome = exp::run_ablation(grid_path, force);
  for (const auto& s : outcome.skipped)
    std::cout << "skipped: " << s << "\n";
  const std::string table = exp::render_results_table(outcome.records);
  std::cout << table;
  if (!table_out.empty()) {
    std::ofstream out(table_out);
    if (!out) throw FormatError(msg("cannot write ", table_out));
    out << table;
    std::cout << "table written to " << table_out << "\n";
  }
  return 0;
}

int cmd_occlusion(const std::string& checkpoint_path, const std::string& sample_path,
                  const std::string& out_dir, std::size_t patch, std::size_t stride,
                  const std::string& baseline, const std::string& target,
                  const std::string& label, int slice) {
  const ckpt::CheckpointMeta meta = ckpt::read_checkpoint_meta(checkpoint_path);
  if (meta.model_config_json.empty())
    throw FormatError(msg("checkpoint ", checkpoint_path,
                          " has no model_config in its manifest sidecar"));
  const models::ModelConfig mcfg =
      models::model_config_from_json(meta.model_config_json);
  auto model = models::build_model<float>(mcfg);
  auto params = model->parameters();
  auto buffers = model->buffers();
  ckpt::load_checkpoint(checkpoint_path, params, buffers);

  occl::OcclusionConfig ocfg;
  ocfg.patch = patch;
  ocfg.stride = stride;
  ocfg.baseline = occl::parse_baseline(baseline);
  ocfg.axial_slice = slice;
  if (target == "predicted") {
    ocfg.target = occl::Target::Predicted;
  } else if (target == "given") {
    ocfg.target = occl::Target::Given;
    if (label.empty())
      throw ConfigError("--class given requires --label <class name or index>");
    if (label == "AD")
      ocfg.given_label = mcfg.num_classes == 2 ? 1 : 2;
    else if (label == "NonAD" || label == "CN")
      ocfg.given_label = 0;
    else if (label == "MCI" && mcfg.num_classes == 3)
      ocfg.given_label = 1;
    else
      ocfg.given_label = std::stoi(label);
  } else {
    throw ConfigError(msg("unknown --class value '", target,
                          "' (expected predicted or given)"));
  }

  const vol::Volume sample = vol::load_volume(sample_path);
  train::TrainContext ctx;
  ctx.slices = mcfg.slices;
  ctx.num_classes = mcfg.num_classes;

  const std::string sample_id = fs::path(sample_path).stem().stem().string();
  occl::RelevanceMap map = occl::model_occlusion(*model, sample, ctx, ocfg, sample_id);

  fs::create_directories(out_dir);
  const std::string base = (fs::path(out_dir) / sample_id).string();
  occl::export_heatmap(map, base);
  std::cout << "relevance grid " << map.grid_h << "x" << map.grid_w
            << " (target class " << map.target_class << ") -> " << base
            << ".relevance.{csv,pgm}\n";
  return 0;
}

int cmd_describe(const std::string& kind, int classes, int slices, double width_mult) {
  models::ModelConfig cfg;
  cfg.kind = models::parse_model_kind(kind);
  cfg.num_classes = classes;
  cfg.slices = slices == 0 ? 16 : slices;
  cfg.dropout = cfg.kind == models::ModelKind::InceptionGrid ? 0.6 : 0.4;
  if (cfg.kind == models::ModelKind::PlaneTransformer && slices == 0)
    cfg.slices = 77;
  cfg.width_mult = width_mult;
  auto model = models::build_model<float>(cfg);
  std::cout << models::to_string(cfg.kind) << " (classes=" << cfg.num_classes
            << ", slices=" << cfg.slices << ", width_mult=" << cfg.width_mult
            << ")\n";
  std::cout << models::describe(model->parameter_table());
  return 0;
}

int cmd_report(const std::string& results_path, const std::string& table_out) {
  const auto rows = exp::load_records(results_path);
  if (rows.empty()) {
    std::cout << "no records in " << results_path << "\n";
    return 1;
  }
  const std::string table = exp::render_results_table(rows);
  std::cout << table;
  if (!table_out.empty()) {
    std::ofstream out(table_out);
    if (!out) throw FormatError(msg("cannot write ", table_out));
    out << table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FDG-PET classification benchmark suite"};
  app.require_subcommand(1);

  // synth
  std::string sy_cohort = "adni-like", sy_out, sy_spec;
  bool sy_small = false;
  std::size_t sy_n = 100;
  std::uint64_t sy_seed = 1;
  double sy_scale = 0, sy_offset = 0, sy_noise = -1;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a phantom cohort");
  synth_cmd->add_option("--cohort", sy_cohort, "Preset: adni-like or fleni-like");
  synth_cmd->add_flag("--small", sy_small, "Desk-scale geometry");
  synth_cmd->add_option("-n,--subjects", sy_n, "Subject count");
  synth_cmd->add_option("--seed", sy_seed, "Generation seed");
  synth_cmd->add_option("--out", sy_out, "Output directory")->required();
  synth_cmd->add_option("--scale", sy_scale, "Intensity scale override");
  synth_cmd->add_option("--offset", sy_offset, "Intensity offset override");
  synth_cmd->add_option("--noise", sy_noise, "Noise sigma override");
  synth_cmd->add_option("--spec", sy_spec, "JSON file overriding cohort fields");

  // preprocess
  std::string pp_manifest, pp_norm = "zscore_per_image", pp_stats_in, pp_stats_out;
  std::vector<std::size_t> pp_grid;
  auto* pp_cmd = app.add_subcommand("preprocess",
                                    "Resample, mask and normalize a cohort");
  pp_cmd->add_option("--manifest", pp_manifest, "Cohort manifest CSV")->required();
  pp_cmd->add_option("--norm", pp_norm,
                     "zscore_per_image | zscore_global | minmax");
  pp_cmd->add_option("--grid", pp_grid, "Target grid X Y Z")->expected(3);
  pp_cmd->add_option("--stats-in", pp_stats_in, "Global stats JSON (zscore_global)");
  pp_cmd->add_option("--stats-out", pp_stats_out, "Write computed global stats");

  // run
  std::string run_config;
  bool run_force = false;
  auto* run_cmd = app.add_subcommand("run", "Run one experiment config");
  run_cmd->add_option("config", run_config, "Experiment config JSON")->required();
  run_cmd->add_flag("--force", run_force, "Re-run even if results exist");

  // ablate
  std::string ab_grid, ab_table;
  bool ab_force = false;
  auto* ab_cmd = app.add_subcommand("ablate", "Run an ablation grid");
  ab_cmd->add_option("grid", ab_grid, "Ablation grid JSON")->required();
  ab_cmd->add_flag("--force", ab_force, "Re-run entries even if present");
  ab_cmd->add_option("--table-out", ab_table, "Write the summary table here");

  // occlusion
  std::string oc_ckpt, oc_sample, oc_out = "occlusion", oc_baseline = "zero";
  std::string oc_target = "predicted", oc_label;
  std::size_t oc_patch = 16, oc_stride = 8;
  int oc_slice = -1;
  auto* oc_cmd = app.add_subcommand("occlusion", "Occlusion sensitivity map");
  oc_cmd->add_option("--checkpoint", oc_ckpt, "Trained checkpoint")->required();
  oc_cmd->add_option("--sample", oc_sample, "Preprocessed volume")->required();
  oc_cmd->add_option("--out", oc_out, "Output directory");
  oc_cmd->add_option("--patch", oc_patch, "Patch size");
  oc_cmd->add_option("--stride", oc_stride, "Stride");
  oc_cmd->add_option("--baseline", oc_baseline, "zero | image-mean");
  oc_cmd->add_option("--class", oc_target, "predicted | given");
  oc_cmd->add_option("--label", oc_label, "Target class when --class given");
  oc_cmd->add_option("--slice", oc_slice,
                     "Axial slice for volume-input models (-1 = middle)");

  // describe
  std::string de_kind = "pruned_resnet";
  int de_classes = 2, de_slices = 0;
  double de_width = 1.0;
  auto* de_cmd = app.add_subcommand("describe", "Print the per-block parameter table");
  de_cmd->add_option("--model", de_kind, "Model kind");
  de_cmd->add_option("--classes", de_classes, "Class count");
  de_cmd->add_option("--slices", de_slices, "Slice count (0 = model default)");
  de_cmd->add_option("--width-mult", de_width, "Width multiplier");

  // report
  std::string rp_results, rp_table;
  auto* rp_cmd = app.add_subcommand("report", "Render the results table");
  rp_cmd->add_option("--results", rp_results, "results.csv path")->required();
  rp_cmd->add_option("--table-out", rp_table, "Write the table here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth_cmd->parsed())
      return cmd_synth(sy_cohort, sy_small, sy_n, sy_seed, sy_out, sy_scale,
                       sy_offset, sy_noise, sy_spec);
    if (pp_cmd->parsed())
      return cmd_preprocess(pp_manifest, pp_norm, pp_grid, pp_stats_in, pp_stats_out);
    if (run_cmd->parsed()) return cmd_run(run_config, run_force);
    if (ab_cmd->parsed()) return cmd_ablate(ab_grid, ab_force, ab_table);
    if (oc_cmd->parsed())
      return cmd_occlusion(oc_ckpt, oc_sample, oc_out, oc_patch, oc_stride,
                           oc_baseline, oc_target, oc_label, oc_slice);
    if (de_cmd->parsed()) return cmd_describe(de_kind, de_classes, de_slices, de_width);
    if (rp_cmd->parsed()) return cmd_report(rp_results, rp_table);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
