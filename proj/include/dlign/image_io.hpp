#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "dlign/projection.hpp"

namespace dlign {

struct Image8 {
  int height = 0;
  int width = 0;
  int channels = 1;  // 1 gray, 3 RGB
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

void write_png(const Image8& img, const std::filesystem::path& path);
Image8 read_png(const std::filesystem::path& path);

// Depth map as 8-bit RGB with the gray value tripled into every channel.
void write_depth_png(const DepthMap& d, const std::filesystem::path& path);
void write_control_png(const ControlImage& c, const std::filesystem::path& path);

}  // namespace dlign
