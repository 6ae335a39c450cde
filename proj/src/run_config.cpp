#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <thread>

#include "dlign/cli.hpp"
#include "dlign/error.hpp"

namespace dlign::cli {
namespace {

using nlohmann::json;

void check_keys(const json& obj, const char* section, const std::set<std::string>& allowed) {
  if (!obj.is_object()) throw ValidationError(std::string("config: \"") + section + "\" must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (!allowed.count(key)) throw ValidationError(std::string("config: unknown key \"") + section + "." + key + "\"");
  }
}

template <typename T>
void read(const json& obj, const char* key, T& dst, const char* section) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("config: \"") + section + "." + key + "\" has the wrong type");
  }
}

std::optional<std::filesystem::path> read_path(const json& obj, const char* key) {
  if (!obj.contains(key)) return std::nullopt;
  if (!obj[key].is_string()) throw ValidationError(std::string("config: \"paths.") + key + "\" must be a string");
  return std::filesystem::path(obj[key].get<std::string>());
}

}  // namespace

std::string tool_version() { return DLIGN_VERSION; }

RunConfig RunConfig::from_json(const json& doc) {
  check_keys(doc, "<root>", {"seed", "max_points", "projection", "views", "train", "probe", "paths"});
  RunConfig c;
  std::uint64_t seed = 0;
  read(doc, "seed", seed, "<root>");
  read(doc, "max_points", c.max_points, "<root>");
  if (doc.contains("projection")) {
    const json& p = doc["projection"];
    check_keys(p, "projection", {"height", "width", "depth_bins", "densify_kernel", "bilateral_kernel",
                                 "sigma_spatial", "sigma_intensity", "median_kernel"});
    read(p, "height", c.projection.height, "projection");
    read(p, "width", c.projection.width, "projection");
    read(p, "depth_bins", c.projection.depth_bins, "projection");
    read(p, "densify_kernel", c.projection.densify_kernel, "projection");
    read(p, "bilateral_kernel", c.projection.bilateral_kernel, "projection");
    read(p, "sigma_spatial", c.projection.sigma_spatial, "projection");
    read(p, "sigma_intensity", c.projection.sigma_intensity, "projection");
    read(p, "median_kernel", c.projection.median_kernel, "projection");
  }
  if (doc.contains("views")) {
    const json& v = doc["views"];
    check_keys(v, "views", {"n_views", "azimuth_start_deg", "azimuth_step_deg", "elevation_deg"});
    read(v, "n_views", c.views.n_views, "views");
    read(v, "azimuth_start_deg", c.views.azimuth_start_deg, "views");
    read(v, "azimuth_step_deg", c.views.azimuth_step_deg, "views");
    read(v, "elevation_deg", c.views.elevation_deg, "views");
  }
  if (doc.contains("train")) {
    const json& t = doc["train"];
    check_keys(t, "train", {"peak_lr", "batch", "epochs", "beta1", "beta2", "eps", "weight_decay", "pct_start",
                            "div_factor", "final_div_factor"});
    read(t, "peak_lr", c.train.peak_lr, "train");
    read(t, "batch", c.train.batch, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "beta1", c.train.beta1, "train");
    read(t, "beta2", c.train.beta2, "train");
    read(t, "eps", c.train.eps, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    read(t, "pct_start", c.train.pct_start, "train");
    read(t, "div_factor", c.train.div_factor, "train");
    read(t, "final_div_factor", c.train.final_div_factor, "train");
  }
  if (doc.contains("probe")) {
    const json& p = doc["probe"];
    check_keys(p, "probe", {"lr", "steps", "l2_lambda"});
    read(p, "lr", c.probe.lr, "probe");
    read(p, "steps", c.probe.steps, "probe");
    read(p, "l2_lambda", c.probe.l2_lambda, "probe");
  }
  if (doc.contains("paths")) {
    const json& p = doc["paths"];
    check_keys(p, "paths", {"dataset", "features", "output"});
    c.paths.dataset = read_path(p, "dataset");
    c.paths.features = read_path(p, "features");
    c.paths.output = read_path(p, "output");
  }
  c.set_seed(seed);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config '" + path.string() + "'");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return from_json(doc);
}

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  train.seed = s;
  probe.seed = s;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["max_points"] = max_points;
  j["projection"] = {{"height", projection.height},
                     {"width", projection.width},
                     {"depth_bins", projection.depth_bins},
                     {"densify_kernel", projection.densify_kernel},
                     {"bilateral_kernel", projection.bilateral_kernel},
                     {"sigma_spatial", projection.sigma_spatial},
                     {"sigma_intensity", projection.sigma_intensity},
                     {"median_kernel", projection.median_kernel}};
  j["views"] = {{"n_views", views.n_views},
                {"azimuth_start_deg", views.azimuth_start_deg},
                {"azimuth_step_deg", views.azimuth_step_deg},
                {"elevation_deg", views.elevation_deg}};
  j["train"] = {{"peak_lr", train.peak_lr},       {"batch", train.batch},
                {"epochs", train.epochs},         {"beta1", train.beta1},
                {"beta2", train.beta2},           {"eps", train.eps},
                {"weight_decay", train.weight_decay}, {"pct_start", train.pct_start},
                {"div_factor", train.div_factor}, {"final_div_factor", train.final_div_factor}};
  j["probe"] = {{"lr", probe.lr}, {"steps", probe.steps}, {"l2_lambda", probe.l2_lambda}};
  nlohmann::ordered_json paths_j = nlohmann::ordered_json::object();
  if (paths.dataset) paths_j["dataset"] = paths.dataset->string();
  if (paths.features) paths_j["features"] = paths.features->string();
  if (paths.output) paths_j["output"] = paths.output->string();
  j["paths"] = paths_j;
  return j;
}

void RunConfig::validate() const {
  try {
    projection.validate();
    train.validate();
    make_view_set(views.n_views, views.azimuth_start_deg, views.azimuth_step_deg, views.elevation_deg);
  } catch (const PreconditionError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  if (!(probe.lr > 0.0) || probe.steps < 0 || !(probe.l2_lambda >= 0.0)) {
    throw ValidationError("config: probe needs lr > 0, steps >= 0, l2_lambda >= 0");
  }
}

std::string config_hash(const RunConfig& cfg) {
  const std::string text = cfg.to_json().dump();
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void write_run_manifest(const std::filesystem::path& out_dir, const std::string& command, const RunConfig& cfg,
                        const nlohmann::ordered_json& inputs) {
  nlohmann::ordered_json j;
  j["tool"] = "dlign";
  j["version"] = tool_version();
  j["command"] = command;
  j["config_hash"] = config_hash(cfg);
  j["seed"] = cfg.seed;
  j["config"] = cfg.to_json();
  j["inputs"] = inputs;
  const auto path = out_dir / kRunManifestName;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

int resolve_jobs(std::optional<int> flag) {
  if (flag && *flag > 0) return *flag;
  if (const char* env = std::getenv("DLIGN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<int>(v);
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace dlign::cli
