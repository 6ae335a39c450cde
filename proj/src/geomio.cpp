#include "dlign/geomio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>

#include <json.hpp>

#include "dlign/error.hpp"

namespace dlign {
namespace {

struct Box {
  Vec3 lo{std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity()};
  Vec3 hi{-std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          -std::numeric_limits<double>::infinity()};
};

Box bounds(const std::vector<Vec3>& pts) {
  Box b;
  for (const Vec3& p : pts) {
    b.lo.x = std::min(b.lo.x, p.x);
    b.lo.y = std::min(b.lo.y, p.y);
    b.lo.z = std::min(b.lo.z, p.z);
    b.hi.x = std::max(b.hi.x, p.x);
    b.hi.y = std::max(b.hi.y, p.y);
    b.hi.z = std::max(b.hi.z, p.z);
  }
  return b;
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Output of normalize_unit_cube up to rounding: inside the cube, longest
// edge spanning [0,1], box midpoint at the center.
bool is_unit_normalized(const Box& b) {
  constexpr double kTol = 1e-12;
  if (b.lo.x < 0.0 || b.lo.y < 0.0 || b.lo.z < 0.0 || b.hi.x > 1.0 || b.hi.y > 1.0 || b.hi.z > 1.0) return false;
  const double extent = std::max({b.hi.x - b.lo.x, b.hi.y - b.lo.y, b.hi.z - b.lo.z});
  const bool degenerate = extent == 0.0;
  if (!degenerate && std::abs(extent - 1.0) > kTol) return false;
  for (double mid : {0.5 * (b.lo.x + b.hi.x), 0.5 * (b.lo.y + b.hi.y), 0.5 * (b.lo.z + b.hi.z)}) {
    if (std::abs(mid - 0.5) > kTol) return false;
  }
  return true;
}

bool inside_unit_cube(const std::vector<Vec3>& pts) {
  return std::all_of(pts.begin(), pts.end(), [](const Vec3& p) {
    return p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0 && p.z >= 0.0 && p.z <= 1.0;
  });
}

}  // namespace

PointCloud normalize_unit_cube(const PointCloud& pc) {
  if (pc.points.empty()) throw PreconditionError("normalize_unit_cube: empty point cloud '" + pc.id + "'");
  const Box b = bounds(pc.points);
  if (is_unit_normalized(b)) return pc;

  PointCloud out = pc;
  const double extent = std::max({b.hi.x - b.lo.x, b.hi.y - b.lo.y, b.hi.z - b.lo.z});
  if (extent == 0.0) {
    for (Vec3& p : out.points) p = Vec3{0.5, 0.5, 0.5};
    return out;
  }
  const double scale = 1.0 / extent;
  const Vec3 mid{0.5 * (b.lo.x + b.hi.x), 0.5 * (b.lo.y + b.hi.y), 0.5 * (b.lo.z + b.hi.z)};
  for (Vec3& p : out.points) {
    p.x = clamp01((p.x - mid.x) * scale + 0.5);
    p.y = clamp01((p.y - mid.y) * scale + 0.5);
    p.z = clamp01((p.z - mid.z) * scale + 0.5);
  }
  return out;
}

std::vector<ViewPose> make_view_set(int n_views, double azimuth_start_deg, double azimuth_step_deg,
                                    double elevation_deg) {
  if (n_views < 1) throw PreconditionError("make_view_set: n_views must be >= 1");
  if (!(elevation_deg >= -90.0 && elevation_deg <= 90.0)) {
    throw PreconditionError("make_view_set: elevation must lie in [-90, 90] degrees");
  }
  std::vector<ViewPose> poses;
  poses.reserve(static_cast<std::size_t>(n_views));
  for (int k = 0; k < n_views; ++k) {
    double az = std::fmod(azimuth_start_deg + k * azimuth_step_deg, 360.0);
    if (az < 0.0) az += 360.0;
    if (az >= 360.0) az -= 360.0;
    poses.push_back(ViewPose{k, az, elevation_deg});
  }
  return poses;
}

PointCloud rotate_to_view(const PointCloud& pc, const ViewPose& pose) {
  constexpr double kDeg = std::numbers::pi / 180.0;
  const double ca = std::cos(pose.azimuth_deg * kDeg);
  const double sa = std::sin(pose.azimuth_deg * kDeg);
  const double ce = std::cos(pose.elevation_deg * kDeg);
  const double se = std::sin(pose.elevation_deg * kDeg);

  PointCloud out = pc;
  if (pose.azimuth_deg == 0.0 && pose.elevation_deg == 0.0) return out;
  for (Vec3& p : out.points) {
    const double dx = p.x - 0.5;
    const double dy = p.y - 0.5;
    const double dz = p.z - 0.5;
    // Azimuth about y.
    const double ax = ca * dx + sa * dz;
    const double az = -sa * dx + ca * dz;
    // Elevation about x.
    const double ey = ce * dy - se * az;
    const double ez = se * dy + ce * az;
    p = Vec3{ax + 0.5, ey + 0.5, ez + 0.5};
  }
  // Snap rounding noise (e.g. cos(90 deg) != 0) before testing containment.
  constexpr double kSnap = 1e-12;
  for (Vec3& p : out.points) {
    for (double* c : {&p.x, &p.y, &p.z}) {
      if (*c < 0.0 && *c > -kSnap) *c = 0.0;
      if (*c > 1.0 && *c < 1.0 + kSnap) *c = 1.0;
    }
  }
  if (!inside_unit_cube(out.points)) out = normalize_unit_cube(out);
  for (Vec3& p : out.points) p = Vec3{clamp01(p.x), clamp01(p.y), clamp01(p.z)};
  return out;
}

PointCloud uniform_downsample(const PointCloud& pc, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw PreconditionError("uniform_downsample: n must be >= 1");
  if (pc.points.size() <= n) return pc;
  PointCloud out;
  out.id = pc.id;
  out.metadata = pc.metadata;
  out.points.reserve(n);
  std::mt19937_64 rng(seed);
  std::sample(pc.points.begin(), pc.points.end(), std::back_inserter(out.points), n, rng);
  return out;
}

std::vector<DatasetEntry> load_dataset_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("dataset manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (!doc.is_object() || !doc.contains("shapes") || !doc["shapes"].is_object()) {
    throw ValidationError("dataset manifest needs a \"shapes\" object");
  }
  const std::filesystem::path base = path.parent_path();
  std::vector<DatasetEntry> entries;
  for (const auto& [id, spec] : doc["shapes"].items()) {
    if (id.empty()) throw ValidationError("dataset manifest contains an empty shape id");
    if (!spec.is_object() || !spec.contains("pointcloud") || !spec["pointcloud"].is_string()) {
      throw ValidationError("shape '" + id + "' lacks a \"pointcloud\" path");
    }
    DatasetEntry e;
    e.id = id;
    const std::filesystem::path p = spec["pointcloud"].get<std::string>();
    e.pointcloud = p.is_absolute() ? p : base / p;
    if (spec.contains("metadata") && spec["metadata"].is_string()) e.metadata = spec["metadata"].get<std::string>();
    if (spec.contains("label") && spec["label"].is_string()) e.label = spec["label"].get<std::string>();
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw ValidationError("dataset manifest lists no shapes");
  return entries;
}

}  // namespace dlign
