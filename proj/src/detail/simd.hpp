#pragma once

#include <cstddef>

namespace dlign::detail {

// One symmetric bilateral tap between a run of center voxels c[0..len) and
// the neighbors u[0..len) at a fixed offset. For each i
//   e = spatial * exp(neg_inv_range * (c[i] - u[i])^2)
//   nc[i] += e * u[i];  dc[i] += (u[i] > 0 ? e : 0)
//   nu[i] += e * c[i];  du[i] += e
// Centers are occupied; an empty neighbor adds nothing to the center and
// its own accumulators are never read. Lanes are processed in blocks of 4,
// center updates before neighbor updates, so nc/dc may alias nu/du at a
// shift. The scalar and AVX2 paths run the same IEEE operation sequence and
// agree bit for bit.
void bilateral_pair_tap(const double* c, const double* u, std::size_t len, double spatial, double neg_inv_range,
                        double* nc, double* dc, double* nu, double* du);

void bilateral_pair_tap_scalar(const double* c, const double* u, std::size_t len, double spatial,
                               double neg_inv_range, double* nc, double* dc, double* nu, double* du);
#if defined(__x86_64__)
void bilateral_pair_tap_avx2(const double* c, const double* u, std::size_t len, double spatial,
                             double neg_inv_range, double* nc, double* dc, double* nu, double* du);
#endif

bool simd_available();

// exp(x) for x <= 0 with the same polynomial as the tap kernels; inputs
// below -700 are clamped.
double exp_nonpositive(double x);

struct ExpCoeffs {
  static constexpr double kLog2e = 1.4426950408889634073599;
  static constexpr double kC1 = 0.693145751953125;
  static constexpr double kC2 = 1.42860682030941723212e-6;
  static constexpr double kP0 = 1.26177193074810590878e-4;
  static constexpr double kP1 = 3.02994407707441961300e-2;
  static constexpr double kP2 = 9.99999999999999999910e-1;
  static constexpr double kQ0 = 3.00198505138664455042e-6;
  static constexpr double kQ1 = 2.52448340349684104192e-3;
  static constexpr double kQ2 = 2.27265548208155028766e-1;
  static constexpr double kQ3 = 2.00000000000000000009e0;
  static constexpr double kMin = -700.0;
};

}  // namespace dlign::detail
