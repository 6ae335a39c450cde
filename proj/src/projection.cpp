#include "dlign/projection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "detail/simd.hpp"
#include "dlign/error.hpp"
#include "dlign/parallel.hpp"

namespace dlign {
namespace {

void require_odd_kernel(int kernel, const char* what) {
  if (kernel < 1 || kernel % 2 == 0) {
    throw PreconditionError(std::string(what) + ": kernel must be odd and >= 1, got " + std::to_string(kernel));
  }
}

int cell_of(double v, int n) { return std::min(static_cast<int>(std::floor(v * n)), n - 1); }

// Sliding max along one axis. The grid is viewed as [outer][len][inner]
// with the filtered axis of length `len`.
void max_pass(const std::vector<double>& in, std::vector<double>& out, std::size_t outer, int len,
              std::size_t inner, int radius) {
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t base = o * static_cast<std::size_t>(len) * inner;
    for (int i = 0; i < len; ++i) {
      double* dst = out.data() + base + static_cast<std::size_t>(i) * inner;
      const int lo = std::max(0, i - radius);
      const int hi = std::min(len - 1, i + radius);
      const double* src = in.data() + base + static_cast<std::size_t>(lo) * inner;
      std::copy(src, src + inner, dst);
      for (int j = lo + 1; j <= hi; ++j) {
        src = in.data() + base + static_cast<std::size_t>(j) * inner;
        for (std::size_t k = 0; k < inner; ++k) dst[k] = std::max(dst[k], src[k]);
      }
    }
  }
}

struct SpatialTable {
  int radius;
  int kernel;
  std::vector<double> weights;

  SpatialTable(int k, double sigma) : radius(k / 2), kernel(k), weights(static_cast<std::size_t>(k) * k * k) {
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int dh = -radius; dh <= radius; ++dh) {
      for (int dw = -radius; dw <= radius; ++dw) {
        for (int db = -radius; db <= radius; ++db) {
          weights[offset(dh, dw, db)] = std::exp(-static_cast<double>(dh * dh + dw * dw + db * db) * inv);
        }
      }
    }
  }

  std::size_t offset(int dh, int dw, int db) const {
    return (static_cast<std::size_t>(dh + radius) * kernel + (dw + radius)) * kernel + (db + radius);
  }
};

// Occupied depth range per column; lo > hi marks an empty column.
struct ColumnSpan {
  int lo;
  int hi;
};

std::vector<ColumnSpan> column_spans(const VoxelGrid& g) {
  std::vector<ColumnSpan> spans(static_cast<std::size_t>(g.height) * g.width, ColumnSpan{g.depth, -1});
  for (int h = 0; h < g.height; ++h) {
    for (int w = 0; w < g.width; ++w) {
      const double* col = g.values.data() + g.index(h, w, 0);
      ColumnSpan& s = spans[static_cast<std::size_t>(h) * g.width + w];
      for (int b = 0; b < g.depth; ++b) {
        if (col[b] > 0.0) {
          s.lo = std::min(s.lo, b);
          s.hi = b;
        }
      }
    }
  }
  return spans;
}

// Maximal occupied runs of every depth column, flattened.
class ColumnRuns {
 public:
  explicit ColumnRuns(const VoxelGrid& g) : offsets_(static_cast<std::size_t>(g.height) * g.width + 1, 0) {
    for (int h = 0; h < g.height; ++h) {
      for (int w = 0; w < g.width; ++w) {
        const double* col = g.values.data() + g.index(h, w, 0);
        int b = 0;
        while (b < g.depth) {
          if (col[b] <= 0.0) {
            ++b;
            continue;
          }
          const int lo = b;
          while (b < g.depth && col[b] > 0.0) ++b;
          runs_.push_back({lo, b - 1});
        }
        offsets_[static_cast<std::size_t>(h) * g.width + w + 1] = runs_.size();
      }
    }
  }

  std::size_t count(std::size_t col) const { return offsets_[col + 1] - offsets_[col]; }
  const ColumnSpan* begin(std::size_t col) const { return runs_.data() + offsets_[col]; }
  const ColumnSpan* end(std::size_t col) const { return runs_.data() + offsets_[col + 1]; }

 private:
  std::vector<std::size_t> offsets_;
  std::vector<ColumnSpan> runs_;
};

}  // namespace

void ProjectionConfig::validate() const {
  if (height < 1 || width < 1 || depth_bins < 1) {
    throw PreconditionError("projection: H, W and B must all be >= 1");
  }
  require_odd_kernel(densify_kernel, "densify");
  require_odd_kernel(bilateral_kernel, "bilateral");
  require_odd_kernel(median_kernel, "median");
  if (!(sigma_spatial > 0.0) || !(sigma_intensity > 0.0)) {
    throw PreconditionError("projection: bilateral sigmas must be > 0");
  }
}

VoxelGrid quantize(const PointCloud& pc, const ProjectionConfig& cfg) {
  cfg.validate();
  VoxelGrid g(cfg.height, cfg.width, cfg.depth_bins);
  for (std::size_t i = 0; i < pc.points.size(); ++i) {
    const Vec3& p = pc.points[i];
    if (!(p.x >= 0.0 && p.x <= 1.0 && p.y >= 0.0 && p.y <= 1.0 && p.z >= 0.0 && p.z <= 1.0)) {
      throw PreconditionError("quantize: point " + std::to_string(i) + " lies outside [0,1]^3");
    }
    const int h = cell_of(p.y, cfg.height);
    const int w = cell_of(p.x, cfg.width);
    const int b = cell_of(p.z, cfg.depth_bins);
    double& v = g.at(h, w, b);
    const double intensity = depth_intensity(p.z);
    // Intensity grows with z, so keeping the smaller value keeps the nearer point.
    if (v == 0.0 || intensity < v) v = intensity;
  }
  return g;
}

VoxelGrid densify(const VoxelGrid& g, int kernel) {
  require_odd_kernel(kernel, "densify");
  const int r = kernel / 2;
  VoxelGrid out(g.height, g.width, g.depth);
  if (r == 0) {
    out.values = g.values;
    return out;
  }
  std::vector<double> tmp(g.values.size());
  const std::size_t H = g.height, W = g.width, B = g.depth;
  max_pass(g.values, tmp, H * W, g.depth, 1, r);     // along b
  max_pass(tmp, out.values, H, g.width, B, r);       // along w
  max_pass(out.values, tmp, 1, g.height, W * B, r);  // along h
  out.values.swap(tmp);
  return out;
}

VoxelGrid smooth_bilateral(const VoxelGrid& g, int kernel, double sigma_spatial, double sigma_intensity) {
  require_odd_kernel(kernel, "bilateral");
  if (!(sigma_spatial > 0.0) || !(sigma_intensity > 0.0)) {
    throw PreconditionError("bilateral: sigmas must be > 0");
  }
  const SpatialTable spatial(kernel, sigma_spatial);
  const int r = spatial.radius;
  const double inv_range = 1.0 / (2.0 * sigma_intensity * sigma_intensity);
  const auto spans = column_spans(g);
  const ColumnRuns runs(g);
  VoxelGrid out(g.height, g.width, g.depth);

  // Pair weights are symmetric, so every unordered pair of occupied voxels is
  // evaluated once, from the voxel earlier in (dh, dw, db) order, and
  // credited to both. Each occupied run meets a tap as one strided pass. The
  // center term (weight 1) seeds the accumulators.
  std::vector<double> num = g.values;
  std::vector<double> den(g.values.size());
  for (std::size_t i = 0; i < den.size(); ++i) den[i] = g.values[i] > 0.0 ? 1.0 : 0.0;
  for (int h = 0; h < g.height; ++h) {
    for (int w = 0; w < g.width; ++w) {
      const std::size_t col = static_cast<std::size_t>(h) * g.width + w;
      if (runs.count(col) == 0) continue;
      const std::size_t center_base = g.index(h, w, 0);
      for (const ColumnSpan* run = runs.begin(col); run != runs.end(col); ++run) {
        for (int dh = 0; dh <= r; ++dh) {
          const int nh = h + dh;
          if (nh >= g.height) continue;
          for (int dw = dh == 0 ? 0 : -r; dw <= r; ++dw) {
            const int nw = w + dw;
            if (nw < 0 || nw >= g.width) continue;
            const ColumnSpan ns = spans[static_cast<std::size_t>(nh) * g.width + nw];
            if (ns.lo > ns.hi) continue;
            const std::size_t neighbor_base = g.index(nh, nw, 0);
            const double* swt = spatial.weights.data() + spatial.offset(dh, dw, 0);
            for (int db = dh == 0 && dw == 0 ? 1 : -r; db <= r; ++db) {
              const int b_lo = std::max(run->lo, ns.lo - db);
              const int b_hi = std::min(run->hi, ns.hi - db);
              if (b_lo > b_hi) continue;
              const std::size_t ci = center_base + static_cast<std::size_t>(b_lo);
              const std::size_t ni = neighbor_base + static_cast<std::size_t>(b_lo + db);
              detail::bilateral_pair_tap(g.values.data() + ci, g.values.data() + ni,
                                         static_cast<std::size_t>(b_hi - b_lo + 1), swt[db], -inv_range,
                                         num.data() + ci, den.data() + ci, num.data() + ni, den.data() + ni);
            }
          }
        }
      }
    }
  }
  // den >= 1 wherever the voxel is occupied.
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    if (g.values[i] > 0.0) out.values[i] = num[i] / den[i];
  }
  return out;
}

std::vector<double> bilateral_weights(const VoxelGrid& g, int h, int w, int b, int kernel, double sigma_spatial,
                                      double sigma_intensity) {
  require_odd_kernel(kernel, "bilateral");
  const double iv = g.at(h, w, b);
  std::vector<double> weights;
  if (iv <= 0.0) return weights;
  const int r = kernel / 2;
  const double inv_spatial = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
  const double inv_range = 1.0 / (2.0 * sigma_intensity * sigma_intensity);
  double den = 0.0;
  for (int dh = -r; dh <= r; ++dh) {
    for (int dw = -r; dw <= r; ++dw) {
      for (int db = -r; db <= r; ++db) {
        const int nh = h + dh, nw = w + dw, nb = b + db;
        if (nh < 0 || nh >= g.height || nw < 0 || nw >= g.width || nb < 0 || nb >= g.depth) continue;
        const double iu = g.at(nh, nw, nb);
        if (iu <= 0.0) continue;
        const double diff = iv - iu;
        const double wgt = std::exp(-static_cast<double>(dh * dh + dw * dw + db * db) * inv_spatial) *
                           std::exp(-diff * diff * inv_range);
        weights.push_back(wgt);
        den += wgt;
      }
    }
  }
  for (double& x : weights) x /= den;
  return weights;
}

DepthMap squeeze(const VoxelGrid& g) {
  DepthMap d(g.height, g.width);
  for (int h = 0; h < g.height; ++h) {
    for (int w = 0; w < g.width; ++w) {
      const double* col = g.values.data() + g.index(h, w, 0);
      double best = std::numeric_limits<double>::infinity();
      for (int b = 0; b < g.depth; ++b) {
        if (col[b] > 0.0) best = std::min(best, col[b]);
      }
      d.at(h, w) = std::isinf(best) ? 0.0 : best;
    }
  }
  return d;
}

DepthMap median_filter(const DepthMap& d, int kernel) {
  require_odd_kernel(kernel, "median");
  const int r = kernel / 2;
  DepthMap out(d.height, d.width);
  std::vector<double> window;
  window.reserve(static_cast<std::size_t>(kernel) * kernel);
  for (int h = 0; h < d.height; ++h) {
    const int h0 = std::max(0, h - r), h1 = std::min(d.height - 1, h + r);
    for (int w = 0; w < d.width; ++w) {
      const int w0 = std::max(0, w - r), w1 = std::min(d.width - 1, w + r);
      window.clear();
      for (int y = h0; y <= h1; ++y) {
        const double* row = d.values.data() + static_cast<std::size_t>(y) * d.width;
        window.insert(window.end(), row + w0, row + w1 + 1);
      }
      const auto mid = window.begin() + static_cast<std::ptrdiff_t>((window.size() - 1) / 2);
      std::nth_element(window.begin(), mid, window.end());
      out.at(h, w) = *mid;
    }
  }
  return out;
}

DepthMap project_view(const PointCloud& pc, const ViewPose& pose, const ProjectionConfig& cfg) {
  const PointCloud rotated = rotate_to_view(pc, pose);
  VoxelGrid g = quantize(rotated, cfg);
  g = densify(g, cfg.densify_kernel);
  g = smooth_bilateral(g, cfg.bilateral_kernel, cfg.sigma_spatial, cfg.sigma_intensity);
  return median_filter(squeeze(g), cfg.median_kernel);
}

std::vector<DepthMap> project_views(const PointCloud& pc, std::span<const ViewPose> poses,
                                    const ProjectionConfig& cfg, int jobs) {
  cfg.validate();
  std::vector<DepthMap> maps(poses.size());
  parallel_for(poses.size(), jobs, [&](std::size_t k) {
    try {
      maps[k] = project_view(pc, poses[k], cfg);
    } catch (const Error& e) {
      throw Error("view " + std::to_string(poses[k].index) + ": " + e.what());
    }
  });
  return maps;
}

ControlImage export_control_image(const DepthMap& d) {
  ControlImage img{d.height, d.width, std::vector<std::uint8_t>(d.values.size(), 0)};
  double r_min = std::numeric_limits<double>::infinity();
  double r_max = -std::numeric_limits<double>::infinity();
  for (double v : d.values) {
    if (v <= 0.0) continue;
    const double r = 1.0 / v;
    r_min = std::min(r_min, r);
    r_max = std::max(r_max, r);
  }
  if (r_min > r_max) return img;
  const double span = r_max - r_min;
  for (std::size_t i = 0; i < d.values.size(); ++i) {
    const double v = d.values[i];
    if (v <= 0.0) continue;
    if (span == 0.0) {
      img.values[i] = 255;
      continue;
    }
    const double scaled = 1.0 + (1.0 / v - r_min) / span * 254.0;
    img.values[i] = static_cast<std::uint8_t>(std::clamp(std::floor(scaled + 0.5), 1.0, 255.0));
  }
  return img;
}

std::vector<std::uint8_t> depth_to_u8(const DepthMap& d) {
  std::vector<std::uint8_t> out(d.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::clamp(std::floor(d.values[i] * 255.0 + 0.5), 0.0, 255.0));
  }
  return out;
}

std::string main_generation_prompt(const std::optional<std::string>& metadata) {
  const bool missing = !metadata || metadata->find_first_not_of(" \t\r\n") == std::string::npos;
  return "A realistic " + (missing ? std::string("object") : *metadata) + ".";
}

std::string depth_png_name(int view) { return "view_" + std::to_string(view) + "_depth.png"; }
std::string control_png_name(int view) { return "view_" + std::to_string(view) + "_control.png"; }

std::filesystem::path export_generation_manifest(const PointCloud& pc, std::span<const ViewPose> poses,
                                                 const std::filesystem::path& out_dir, std::uint64_t seed) {
  const bool missing = !pc.metadata || pc.metadata->find_first_not_of(" \t\r\n") == std::string::npos;
  nlohmann::ordered_json doc;
  doc["shape_id"] = pc.id;
  doc["seed"] = seed;
  doc["metadata_missing"] = missing;
  doc["views"] = nlohmann::ordered_json::array();
  for (const ViewPose& pose : poses) {
    const std::string control = control_png_name(pose.index);
    if (!std::filesystem::exists(out_dir / control)) {
      throw PreconditionError("generation manifest: control image '" + (out_dir / control).string() +
                              "' has not been written");
    }
    nlohmann::ordered_json v;
    v["pose"] = {{"index", pose.index}, {"azimuth_deg", pose.azimuth_deg}, {"elevation_deg", pose.elevation_deg}};
    v["control_png"] = control;
    v["main_prompt"] = main_generation_prompt(pc.metadata);
    v["positive_prompt"] = kPositivePrompt;
    v["negative_prompt"] = kNegativePrompt;
    doc["views"].push_back(std::move(v));
  }
  const auto path = out_dir / kGenerationManifestName;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << doc.dump(2) << "\n";
  return path;
}

}  // namespace dlign
