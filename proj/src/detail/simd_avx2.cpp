// Built with -mavx2 and without FMA so no multiply-add is contracted.
// Intrinsics and plain loops only: no inline library code that the linker
// could share with the baseline objects.
#include <immintrin.h>

#include <cstdint>

#include "detail/simd.hpp"

namespace dlign::detail {
namespace {

inline __m256d exp4(__m256d x) {
  using C = ExpCoeffs;
  __m256d v = _mm256_max_pd(x, _mm256_set1_pd(C::kMin));
  const __m256d k =
      _mm256_floor_pd(_mm256_add_pd(_mm256_mul_pd(v, _mm256_set1_pd(C::kLog2e)), _mm256_set1_pd(0.5)));
  v = _mm256_sub_pd(v, _mm256_mul_pd(k, _mm256_set1_pd(C::kC1)));
  v = _mm256_sub_pd(v, _mm256_mul_pd(k, _mm256_set1_pd(C::kC2)));
  const __m256d vv = _mm256_mul_pd(v, v);
  __m256d p = _mm256_add_pd(_mm256_mul_pd(_mm256_set1_pd(C::kP0), vv), _mm256_set1_pd(C::kP1));
  p = _mm256_add_pd(_mm256_mul_pd(p, vv), _mm256_set1_pd(C::kP2));
  p = _mm256_mul_pd(v, p);
  __m256d q = _mm256_add_pd(_mm256_mul_pd(_mm256_set1_pd(C::kQ0), vv), _mm256_set1_pd(C::kQ1));
  q = _mm256_add_pd(_mm256_mul_pd(q, vv), _mm256_set1_pd(C::kQ2));
  q = _mm256_add_pd(_mm256_mul_pd(q, vv), _mm256_set1_pd(C::kQ3));
  const __m256d r = _mm256_div_pd(p, _mm256_sub_pd(q, p));
  const __m256d e = _mm256_add_pd(_mm256_set1_pd(1.0), _mm256_mul_pd(_mm256_set1_pd(2.0), r));
  const __m128i ki = _mm256_cvtpd_epi32(k);
  const __m256i bits =
      _mm256_slli_epi64(_mm256_add_epi64(_mm256_cvtepi32_epi64(ki), _mm256_set1_epi64x(1023)), 52);
  return _mm256_mul_pd(e, _mm256_castsi256_pd(bits));
}

}  // namespace

void bilateral_pair_tap_avx2(const double* c, const double* u, std::size_t len, double spatial,
                             double neg_inv_range, double* nc, double* dc, double* nu, double* du) {
  const __m256d s = _mm256_set1_pd(spatial);
  const __m256d k = _mm256_set1_pd(neg_inv_range);
  const __m256d zero = _mm256_setzero_pd();
  const __m256i lanes = _mm256_set_epi64x(3, 2, 1, 0);
  for (std::size_t i = 0; i < len; i += 4) {
    // Lanes past `len` load as 0 and are never stored.
    const __m256i mask = _mm256_cmpgt_epi64(_mm256_set1_epi64x(static_cast<std::int64_t>(len - i)), lanes);
    const __m256d cv = _mm256_maskload_pd(c + i, mask);
    const __m256d uv = _mm256_maskload_pd(u + i, mask);
    const __m256d d = _mm256_sub_pd(cv, uv);
    const __m256d e = _mm256_mul_pd(s, exp4(_mm256_mul_pd(_mm256_mul_pd(d, d), k)));
    const __m256d occupied = _mm256_cmp_pd(uv, zero, _CMP_GT_OQ);
    _mm256_maskstore_pd(nc + i, mask, _mm256_add_pd(_mm256_maskload_pd(nc + i, mask), _mm256_mul_pd(e, uv)));
    _mm256_maskstore_pd(dc + i, mask, _mm256_add_pd(_mm256_maskload_pd(dc + i, mask), _mm256_and_pd(occupied, e)));
    _mm256_maskstore_pd(nu + i, mask, _mm256_add_pd(_mm256_maskload_pd(nu + i, mask), _mm256_mul_pd(e, cv)));
    _mm256_maskstore_pd(du + i, mask, _mm256_add_pd(_mm256_maskload_pd(du + i, mask), e));
  }
}

}  // namespace dlign::detail
