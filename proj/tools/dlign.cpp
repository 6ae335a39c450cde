#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dlign/cli.hpp"
#include "dlign/error.hpp"

namespace {

namespace fs = std::filesystem;
using namespace dlign::cli;

// Config values settable from the command line. Unset flags leave the file
// (or default) value alone.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> max_points;
  std::optional<int> n_views;
  std::optional<int> resolution;
  std::optional<int> depth_bins;
  std::optional<int> epochs;
  std::optional<int> batch;
  std::optional<double> lr;
  std::optional<int> probe_steps;
  std::optional<double> probe_lr;
  std::optional<double> probe_l2;

  void apply(RunConfig& c) const {
    if (seed) c.set_seed(*seed);
    if (max_points) c.max_points = *max_points;
    if (n_views) c.views.n_views = *n_views;
    if (resolution) c.projection.height = c.projection.width = *resolution;
    if (depth_bins) c.projection.depth_bins = *depth_bins;
    if (epochs) c.train.epochs = *epochs;
    if (batch) c.train.batch = *batch;
    if (lr) c.train.peak_lr = *lr;
    if (probe_steps) c.probe.steps = *probe_steps;
    if (probe_lr) c.probe.lr = *probe_lr;
    if (probe_l2) c.probe.l2_lambda = *probe_l2;
  }
};

fs::path pick(const std::string& flag, const std::optional<fs::path>& from_config, const char* name) {
  if (!flag.empty()) return flag;
  if (from_config) return *from_config;
  throw dlign::ValidationError(std::string("missing ") + name + " (flag or config \"paths\")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dlign: depth-map projection, alignment and zero/few-shot 3D shape recognition"};
  app.set_version_flag("--version", tool_version());
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  app.add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", ov.seed, "Seed for every seeded stage");

  std::string manifest, features, out, labels, templates, init, support, query, index, q_image, q_text, q_id,
      predictions, truth;
  std::optional<int> jobs;
  int top_k = 5;
  int top_k_retrieve = 10;

  auto* project = app.add_subcommand("project", "Render depth and control PNGs plus generation manifests");
  project->add_option("--manifest", manifest, "Dataset manifest");
  project->add_option("--out", out, "Output directory");
  project->add_option("--jobs,-j", jobs, "Worker threads (fallback: DLIGN_THREADS)");
  project->add_option("--max-points", ov.max_points, "Downsample clouds above this size (0 keeps all)");
  project->add_option("--views", ov.n_views, "Number of views");
  project->add_option("--resolution", ov.resolution, "Square image size");
  project->add_option("--depth-bins", ov.depth_bins, "Depth quantization bins");

  auto* prompts = app.add_subcommand("prompts", "Write depth-specific prompts for every label");
  prompts->add_option("--labels", labels, "Labels file, one per line")->required();
  prompts->add_option("--templates", templates, "Template file (default: built-in set)");
  prompts->add_option("--out", out, "Output directory");

  auto* align = app.add_subcommand("align", "Train the alignment head");
  align->add_option("--features", features, "Feature manifest");
  align->add_option("--out", out, "Output directory");
  align->add_option("--init", init, "Start from this checkpoint");
  align->add_option("--epochs", ov.epochs, "Training epochs");
  align->add_option("--batch", ov.batch, "Batch size");
  align->add_option("--lr", ov.lr, "Peak learning rate");

  auto* zs = app.add_subcommand("classify-zs", "Zero-shot classification");
  zs->add_option("--features", features, "Feature manifest with labels");
  zs->add_option("--out", out, "Output directory");
  zs->add_option("--top-k", top_k, "Labels written per shape");

  auto* fs_cmd = app.add_subcommand("classify-fs", "Few-shot linear-probe classification");
  fs_cmd->add_option("--support", support, "Labelled support feature manifest")->required();
  fs_cmd->add_option("--query", query, "Query feature manifest")->required();
  fs_cmd->add_option("--out", out, "Output directory");
  fs_cmd->add_option("--top-k", top_k, "Labels written per shape");
  fs_cmd->add_option("--steps", ov.probe_steps, "Gradient descent steps");
  fs_cmd->add_option("--probe-lr", ov.probe_lr, "Probe learning rate");
  fs_cmd->add_option("--l2", ov.probe_l2, "L2 penalty");

  auto* retrieve = app.add_subcommand("retrieve", "Nearest shapes for an image and/or text query");
  retrieve->add_option("--index", index, "Feature manifest to search")->required();
  retrieve->add_option("--query-image", q_image, "Image query features");
  retrieve->add_option("--query-text", q_text, "Text query features");
  retrieve->add_option("--query-id", q_id, "Query name in the output");
  retrieve->add_option("--out", out, "Output directory");
  retrieve->add_option("--top-k", top_k_retrieve, "Hits returned");

  auto* eval = app.add_subcommand("eval", "Top-1/3/5 accuracy of a prediction CSV");
  eval->add_option("--predictions", predictions, "Prediction CSV")->required();
  eval->add_option("--truth", truth, "Manifest with shape labels")->required();
  eval->add_option("--out", out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  std::ostream& log = std::cout;
  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    ov.apply(cfg);
    const auto out_dir = [&] { return pick(out, cfg.paths.output, "--out"); };
    auto opt_path = [](const std::string& s) { return s.empty() ? std::optional<fs::path>{} : fs::path(s); };

    if (*project) {
      return cmd_project(cfg, {pick(manifest, cfg.paths.dataset, "--manifest"), out_dir(), resolve_jobs(jobs)}, log);
    }
    if (*prompts) return cmd_prompts(cfg, {labels, opt_path(templates), out_dir()}, log);
    if (*align) return cmd_align(cfg, {pick(features, cfg.paths.features, "--features"), out_dir(), opt_path(init)}, log);
    if (*zs) return cmd_classify_zs(cfg, {pick(features, cfg.paths.features, "--features"), out_dir(), top_k}, log);
    if (*fs_cmd) return cmd_classify_fs(cfg, {support, query, out_dir(), top_k}, log);
    if (*retrieve) {
      return cmd_retrieve(cfg, {index, opt_path(q_image), opt_path(q_text), q_id, out_dir(), top_k_retrieve}, log);
    }
    if (*eval) return cmd_eval(cfg, {predictions, truth, out_dir()}, log);
  } catch (const dlign::ValidationError& e) {
    std::cerr << "dlign: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
