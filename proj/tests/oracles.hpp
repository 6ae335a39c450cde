#pragma once

// Brute-force reference implementations. Written from the operator
// definitions only, with no shared code paths with the library.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dlign/projection.hpp"

namespace oracle {

inline double grid_at(const dlign::VoxelGrid& g, int h, int w, int b) {
  return g.values[(static_cast<std::size_t>(h) * g.width + w) * g.depth + b];
}

inline bool in_grid(const dlign::VoxelGrid& g, int h, int w, int b) {
  return h >= 0 && h < g.height && w >= 0 && w < g.width && b >= 0 && b < g.depth;
}

inline dlign::VoxelGrid densify(const dlign::VoxelGrid& g, int kernel) {
  const int r = kernel / 2;
  dlign::VoxelGrid out(g.height, g.width, g.depth);
  for (int h = 0; h < g.height; ++h)
    for (int w = 0; w < g.width; ++w)
      for (int b = 0; b < g.depth; ++b) {
        double m = 0.0;
        for (int dh = -r; dh <= r; ++dh)
          for (int dw = -r; dw <= r; ++dw)
            for (int db = -r; db <= r; ++db)
              if (in_grid(g, h + dh, w + dw, b + db)) m = std::max(m, grid_at(g, h + dh, w + dw, b + db));
        out.at(h, w, b) = m;
      }
  return out;
}

inline dlign::DepthMap squeeze(const dlign::VoxelGrid& g) {
  dlign::DepthMap d(g.height, g.width);
  for (int h = 0; h < g.height; ++h)
    for (int w = 0; w < g.width; ++w) {
      std::vector<double> occ;
      for (int b = 0; b < g.depth; ++b)
        if (grid_at(g, h, w, b) > 0.0) occ.push_back(grid_at(g, h, w, b));
      d.at(h, w) = occ.empty() ? 0.0 : *std::min_element(occ.begin(), occ.end());
    }
  return d;
}

inline dlign::DepthMap median(const dlign::DepthMap& d, int kernel) {
  const int r = kernel / 2;
  dlign::DepthMap out(d.height, d.width);
  for (int h = 0; h < d.height; ++h)
    for (int w = 0; w < d.width; ++w) {
      std::vector<double> win;
      for (int dh = -r; dh <= r; ++dh)
        for (int dw = -r; dw <= r; ++dw) {
          const int y = h + dh, x = w + dw;
          if (y >= 0 && y < d.height && x >= 0 && x < d.width) win.push_back(d.at(y, x));
        }
      std::sort(win.begin(), win.end());
      out.at(h, w) = win[(win.size() - 1) / 2];
    }
  return out;
}

inline double bilateral_voxel(const dlign::VoxelGrid& g, int h, int w, int b, int kernel, double s1, double s2) {
  const double iv = grid_at(g, h, w, b);
  if (iv <= 0.0) return 0.0;
  const int r = kernel / 2;
  double num = 0.0, den = 0.0;
  for (int dh = -r; dh <= r; ++dh)
    for (int dw = -r; dw <= r; ++dw)
      for (int db = -r; db <= r; ++db) {
        if (!in_grid(g, h + dh, w + dw, b + db)) continue;
        const double iu = grid_at(g, h + dh, w + dw, b + db);
        if (iu <= 0.0) continue;
        const double dist2 = dh * dh + dw * dw + db * db;
        const double wgt = std::exp(-dist2 / (2 * s1 * s1)) * std::exp(-(iv - iu) * (iv - iu) / (2 * s2 * s2));
        num += wgt * iu;
        den += wgt;
      }
  return num / den;
}

inline dlign::VoxelGrid bilateral(const dlign::VoxelGrid& g, int kernel, double s1, double s2) {
  dlign::VoxelGrid out(g.height, g.width, g.depth);
  for (int h = 0; h < g.height; ++h)
    for (int w = 0; w < g.width; ++w)
      for (int b = 0; b < g.depth; ++b) out.at(h, w, b) = bilateral_voxel(g, h, w, b, kernel, s1, s2);
  return out;
}

// Attention residual forward with explicit loops.
inline Eigen::VectorXd head_forward(const Eigen::MatrixXd& wq, const Eigen::MatrixXd& wk, const Eigen::MatrixXd& wv,
                                    const Eigen::MatrixXd& wo, const Eigen::MatrixXd& x, const Eigen::VectorXd& frozen) {
  const int t = static_cast<int>(x.rows()), d = static_cast<int>(x.cols());
  auto mul = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(a.rows(), b.cols());
    for (int i = 0; i < a.rows(); ++i)
      for (int j = 0; j < b.cols(); ++j)
        for (int k = 0; k < a.cols(); ++k) c(i, j) += a(i, k) * b(k, j);
    return c;
  };
  const Eigen::MatrixXd q = mul(x, wq), k = mul(x, wk), v = mul(x, wv);
  Eigen::MatrixXd a(t, t);
  for (int i = 0; i < t; ++i) {
    double mx = -1e300;
    for (int j = 0; j < t; ++j) {
      double s = 0.0;
      for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      a(i, j) = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, a(i, j));
    }
    double z = 0.0;
    for (int j = 0; j < t; ++j) z += (a(i, j) = std::exp(a(i, j) - mx));
    for (int j = 0; j < t; ++j) a(i, j) /= z;
  }
  const Eigen::MatrixXd y = mul(mul(a, v), wo);
  Eigen::VectorXd u = frozen;
  for (int c = 0; c < d; ++c) {
    double m = 0.0;
    for (int i = 0; i < t; ++i) m += y(i, c);
    u(c) += m / t;
  }
  double n = 0.0;
  for (int c = 0; c < d; ++c) n += u(c) * u(c);
  return u / std::sqrt(n);
}

inline Eigen::MatrixXd logits(const Eigen::MatrixXd& views, const Eigen::MatrixXd& labels) {
  Eigen::MatrixXd out(views.rows(), labels.rows());
  for (int i = 0; i < views.rows(); ++i)
    for (int j = 0; j < labels.rows(); ++j) {
      double s = 0.0;
      for (int c = 0; c < views.cols(); ++c) s += views(i, c) * labels(j, c);
      out(i, j) = s;
    }
  return out;
}

// Exhaustive scan: cosine against every row, full sort, ties by id.
inline std::vector<std::pair<std::string, double>> knn(const std::vector<std::string>& ids, const Eigen::MatrixXd& rows,
                                                       const Eigen::VectorXd& q, int k) {
  double qn = 0.0;
  for (int c = 0; c < q.size(); ++c) qn += q(c) * q(c);
  qn = std::sqrt(qn);
  std::vector<std::pair<std::string, double>> all;
  for (int i = 0; i < rows.rows(); ++i) {
    double s = 0.0;
    for (int c = 0; c < q.size(); ++c) s += rows(i, c) * (q(c) / qn);
    all.emplace_back(ids[static_cast<std::size_t>(i)], s);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  all.resize(static_cast<std::size_t>(k));
  return all;
}

}  // namespace oracle
