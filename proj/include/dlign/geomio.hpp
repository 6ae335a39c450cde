#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dlign {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct PointCloud {
  std::vector<Vec3> points;
  std::string id;
  // Semantic description; fills the main generation prompt.
  std::optional<std::string> metadata;
};

// One orthographic camera. Azimuth turns about the vertical (y) axis,
// elevation about the horizontal (x) axis; the view looks down +z.
struct ViewPose {
  int index = 0;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
};

enum class PointFormat { kPlyAscii, kPlyBinaryLE, kXyzText };

// Reads vertex positions only. Throws ParseError with the failing byte
// offset on a malformed header, truncated payload, or zero vertices.
PointCloud load_point_cloud(const std::filesystem::path& path, PointFormat format);

// Picks the format from the extension, peeking into PLY headers for the
// ascii/binary distinction.
PointFormat detect_point_format(const std::filesystem::path& path);

// Binary little-endian PLY with float32 x/y/z.
void write_ply_binary(const PointCloud& pc, const std::filesystem::path& path);

PointCloud normalize_unit_cube(const PointCloud& pc);

std::vector<ViewPose> make_view_set(int n_views = 10, double azimuth_start_deg = 30.0,
                                    double azimuth_step_deg = 30.0, double elevation_deg = 0.0);

PointCloud rotate_to_view(const PointCloud& pc, const ViewPose& pose);

PointCloud uniform_downsample(const PointCloud& pc, std::size_t n, std::uint64_t seed);

// Dataset manifest: {"shapes": {id: {"pointcloud", "metadata", "label"}}}.
// Relative point cloud paths resolve against the manifest's directory.
struct DatasetEntry {
  std::string id;
  std::filesystem::path pointcloud;
  std::optional<std::string> metadata;
  std::string label;
};

std::vector<DatasetEntry> load_dataset_manifest(const std::filesystem::path& path);

}  // namespace dlign
