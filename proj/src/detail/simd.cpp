#include "detail/simd.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>

namespace dlign::detail {

double exp_nonpositive(double x) {
  using C = ExpCoeffs;
  double v = x < C::kMin ? C::kMin : x;
  const double k = std::floor(v * C::kLog2e + 0.5);
  v = v - k * C::kC1;
  v = v - k * C::kC2;
  const double vv = v * v;
  const double p = v * ((C::kP0 * vv + C::kP1) * vv + C::kP2);
  const double q = ((C::kQ0 * vv + C::kQ1) * vv + C::kQ2) * vv + C::kQ3;
  const double e = 1.0 + 2.0 * (p / (q - p));
  const std::int64_t bits = (static_cast<std::int64_t>(k) + 1023) << 52;
  double scale;
  std::memcpy(&scale, &bits, sizeof(scale));
  return e * scale;
}

void bilateral_pair_tap_scalar(const double* c, const double* u, std::size_t len, double spatial,
                               double neg_inv_range, double* nc, double* dc, double* nu, double* du) {
  double e[4];
  for (std::size_t i = 0; i < len; i += 4) {
    const std::size_t m = len - i < 4 ? len - i : 4;
    for (std::size_t l = 0; l < m; ++l) {
      const double d = c[i + l] - u[i + l];
      e[l] = spatial * exp_nonpositive((d * d) * neg_inv_range);
    }
    for (std::size_t l = 0; l < m; ++l) {
      nc[i + l] = nc[i + l] + e[l] * u[i + l];
      dc[i + l] = dc[i + l] + (u[i + l] > 0.0 ? e[l] : 0.0);
    }
    for (std::size_t l = 0; l < m; ++l) {
      nu[i + l] = nu[i + l] + e[l] * c[i + l];
      du[i + l] = du[i + l] + e[l];
    }
  }
}

bool simd_available() {
#if defined(__x86_64__)
  static const bool avx2 = __builtin_cpu_supports("avx2");
  return avx2;
#else
  return false;
#endif
}

void bilateral_pair_tap(const double* c, const double* u, std::size_t len, double spatial, double neg_inv_range,
                        double* nc, double* dc, double* nu, double* du) {
  using Fn = void (*)(const double*, const double*, std::size_t, double, double, double*, double*, double*, double*);
#if defined(__x86_64__)
  static const Fn fn = simd_available() ? bilateral_pair_tap_avx2 : bilateral_pair_tap_scalar;
#else
  static const Fn fn = bilateral_pair_tap_scalar;
#endif
  fn(c, u, len, spatial, neg_inv_range, nc, dc, nu, du);
}

}  // namespace dlign::detail
