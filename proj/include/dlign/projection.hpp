#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlign/geomio.hpp"

namespace dlign {

struct ProjectionConfig {
  int height = 224;
  int width = 224;
  int depth_bins = 32;
  int densify_kernel = 7;
  int bilateral_kernel = 5;
  double sigma_spatial = 2.0;    // voxels
  double sigma_intensity = 0.1;  // intensity units
  int median_kernel = 7;

  // Throws PreconditionError on non-positive sizes, even kernels or sigmas <= 0.
  void validate() const;
};

// Occupied voxels hold 0.1 + 0.9 * z of their nearest point; 0 is empty.
constexpr double kMinOccupied = 0.1;
constexpr double depth_intensity(double z) { return kMinOccupied + (1.0 - kMinOccupied) * z; }

// Dense H x W x B grid, row-major (h, w, b).
struct VoxelGrid {
  int height = 0;
  int width = 0;
  int depth = 0;
  std::vector<double> values;

  VoxelGrid() = default;
  VoxelGrid(int h, int w, int b) : height(h), width(w), depth(b), values(static_cast<std::size_t>(h) * w * b, 0.0) {}

  std::size_t index(int h, int w, int b) const {
    return (static_cast<std::size_t>(h) * width + w) * depth + b;
  }
  double& at(int h, int w, int b) { return values[index(h, w, b)]; }
  double at(int h, int w, int b) const { return values[index(h, w, b)]; }
};

struct DepthMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // [0,1], 0 = background

  DepthMap() = default;
  DepthMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0.0) {}

  double& at(int h, int w) { return values[static_cast<std::size_t>(h) * width + w]; }
  double at(int h, int w) const { return values[static_cast<std::size_t>(h) * width + w]; }
};

// 8-bit inverse-depth condition image: 0 background, 255 nearest.
struct ControlImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  std::uint8_t at(int h, int w) const { return values[static_cast<std::size_t>(h) * width + w]; }
};

VoxelGrid quantize(const PointCloud& pc, const ProjectionConfig& cfg);

// Max over the kernel^3 neighborhood, zero padded.
VoxelGrid densify(const VoxelGrid& g, int kernel);

// Bilateral filter over occupied voxels. Neighbors outside the grid or
// empty are excluded from both the weighted sum and the normalizer.
VoxelGrid smooth_bilateral(const VoxelGrid& g, int kernel, double sigma_spatial, double sigma_intensity);

// Normalized neighbor weights the bilateral filter applies at voxel
// (h, w, b), in neighbor scan order. Empty for an empty voxel.
std::vector<double> bilateral_weights(const VoxelGrid& g, int h, int w, int b, int kernel, double sigma_spatial,
                                      double sigma_intensity);

// Minimum occupied intensity per depth column (0 when the column is empty).
DepthMap squeeze(const VoxelGrid& g);

// Lower median over the in-bounds part of each kernel^2 window.
DepthMap median_filter(const DepthMap& d, int kernel);

// rotate -> quantize -> densify -> smooth -> squeeze -> median, per pose.
// Views are independent; `jobs` > 1 renders them on worker threads.
std::vector<DepthMap> project_views(const PointCloud& pc, std::span<const ViewPose> poses,
                                    const ProjectionConfig& cfg, int jobs = 1);

DepthMap project_view(const PointCloud& pc, const ViewPose& pose, const ProjectionConfig& cfg);

ControlImage export_control_image(const DepthMap& d);

// 8-bit depth values, round half-up of D * 255.
std::vector<std::uint8_t> depth_to_u8(const DepthMap& d);

inline constexpr const char* kPositivePrompt =
    "best quality, extremely realistic, very professional, extremely detailed, sharp edge, normal, complete.";
inline constexpr const char* kNegativePrompt =
    "low-resolution, very blurry, unrealistic, worst quality, deep depth of field, large depth of field, "
    "distorted, cropped, unusual, warped, incomplete.";

std::string main_generation_prompt(const std::optional<std::string>& metadata);

std::string depth_png_name(int view);
std::string control_png_name(int view);
inline constexpr const char* kGenerationManifestName = "generation.json";

// Writes {out_dir}/generation.json describing one diffusion request per view.
// The control PNGs must already exist in out_dir.
std::filesystem::path export_generation_manifest(const PointCloud& pc, std::span<const ViewPose> poses,
                                                 const std::filesystem::path& out_dir, std::uint64_t seed = 0);

}  // namespace dlign
