#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlign/align.hpp"
#include "dlign/inference.hpp"
#include "dlign/projection.hpp"

namespace dlign::cli {

enum ExitCode : int { kExitOk = 0, kExitValidation = 1, kExitPartial = 2 };

std::string tool_version();

struct ViewSetConfig {
  int n_views = 10;
  double azimuth_start_deg = 30.0;
  double azimuth_step_deg = 30.0;
  double elevation_deg = 0.0;
};

struct PathsConfig {
  std::optional<std::filesystem::path> dataset;
  std::optional<std::filesystem::path> features;
  std::optional<std::filesystem::path> output;
};

// Config file schema (every key optional):
//   {"seed": int, "max_points": int,
//    "projection": {"height", "width", "depth_bins", "densify_kernel",
//                   "bilateral_kernel", "sigma_spatial", "sigma_intensity",
//                   "median_kernel"},
//    "views": {"n_views", "azimuth_start_deg", "azimuth_step_deg", "elevation_deg"},
//    "train": {"peak_lr", "batch", "epochs", "beta1", "beta2", "eps",
//              "weight_decay", "pct_start", "div_factor", "final_div_factor"},
//    "probe": {"lr", "steps", "l2_lambda"},
//    "paths": {"dataset", "features", "output"}}
// Unknown keys are rejected. "seed" feeds every seeded stage.
struct RunConfig {
  ProjectionConfig projection;
  ViewSetConfig views;
  TrainConfig train;
  LogRegConfig probe;
  PathsConfig paths;
  std::uint64_t seed = 0;
  std::size_t max_points = 10000;  // 0 keeps every point

  static RunConfig from_json(const nlohmann::json& doc);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  void set_seed(std::uint64_t s);
  // Throws ValidationError describing the first bad value.
  void validate() const;
};

// FNV-1a 64 over the canonical JSON dump, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

// {tool, version, command, config_hash, seed, config, inputs}.
void write_run_manifest(const std::filesystem::path& out_dir, const std::string& command, const RunConfig& cfg,
                        const nlohmann::ordered_json& inputs);

// --jobs if positive, else DLIGN_THREADS, else hardware concurrency.
int resolve_jobs(std::optional<int> flag);

struct ProjectArgs {
  std::filesystem::path manifest;
  std::filesystem::path out;
  int jobs = 1;
};

struct PromptsArgs {
  std::filesystem::path labels;
  std::optional<std::filesystem::path> templates;
  std::filesystem::path out;
};

struct AlignArgs {
  std::filesystem::path features;
  std::filesystem::path out;
  std::optional<std::filesystem::path> init;
};

struct ZeroShotArgs {
  std::filesystem::path features;
  std::filesystem::path out;
  int top_k = 5;
};

struct FewShotArgs {
  std::filesystem::path support;
  std::filesystem::path query;
  std::filesystem::path out;
  int top_k = 5;
};

struct RetrieveArgs {
  std::filesystem::path index;
  std::optional<std::filesystem::path> query_image;
  std::optional<std::filesystem::path> query_text;
  std::string query_id;
  std::filesystem::path out;
  int top_k = 10;
};

struct EvalArgs {
  std::filesystem::path predictions;
  std::filesystem::path truth;
  std::filesystem::path out;
};

// Each command validates every input first and writes nothing when that
// fails. Errors are reported on `log`; the return value is the exit code.
int cmd_project(const RunConfig& cfg, const ProjectArgs& args, std::ostream& log);
int cmd_prompts(const RunConfig& cfg, const PromptsArgs& args, std::ostream& log);
int cmd_align(const RunConfig& cfg, const AlignArgs& args, std::ostream& log);
int cmd_classify_zs(const RunConfig& cfg, const ZeroShotArgs& args, std::ostream& log);
int cmd_classify_fs(const RunConfig& cfg, const FewShotArgs& args, std::ostream& log);
int cmd_retrieve(const RunConfig& cfg, const RetrieveArgs& args, std::ostream& log);
int cmd_eval(const RunConfig& cfg, const EvalArgs& args, std::ostream& log);

// Output file names.
inline constexpr const char* kRunManifestName = "run.json";
inline constexpr const char* kFailuresName = "failures.json";
inline constexpr const char* kPromptsName = "prompts.json";
inline constexpr const char* kCheckpointName = "head.dlhd";
inline constexpr const char* kLossCsvName = "loss.csv";
inline constexpr const char* kPredictionsName = "predictions.csv";
inline constexpr const char* kMetricsName = "metrics.json";
inline constexpr const char* kRetrievalName = "retrieval.jsonl";

}  // namespace dlign::cli
