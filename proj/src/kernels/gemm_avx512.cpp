// AVX-512F tier. Compiled with -mavx512f -mfma; only entered after a
// runtime cpuid check.

#include <immintrin.h>

#include <cstdint>

#include "gemm_driver.hpp"

namespace tempo::simd::detail {

namespace {

struct Avx512Kernel {
  static constexpr int MR = 14;
  static constexpr int NR = 32;
  static constexpr std::int64_t KC = 256;
  static constexpr std::int64_t MC = MR * 12;
  static constexpr std::int64_t NC = 2048;

  static void run(std::int64_t kc, const float* a, const float* b, float* c, std::int64_t ldc,
                  int mr, int nr) {
    __m512 acc[MR][2];
#pragma GCC unroll 14
    for (int i = 0; i < MR; ++i) {
      acc[i][0] = _mm512_setzero_ps();
      acc[i][1] = _mm512_setzero_ps();
    }
    for (std::int64_t p = 0; p < kc; ++p) {
      const __m512 b0 = _mm512_load_ps(b);
      const __m512 b1 = _mm512_load_ps(b + 16);
#pragma GCC unroll 14
      for (int i = 0; i < MR; ++i) {
        const __m512 av = _mm512_set1_ps(a[i]);
        acc[i][0] = _mm512_fmadd_ps(av, b0, acc[i][0]);
        acc[i][1] = _mm512_fmadd_ps(av, b1, acc[i][1]);
      }
      a += MR;
      b += NR;
    }
    if (mr == MR && nr == NR) {
#pragma GCC unroll 14
      for (int i = 0; i < MR; ++i) {
        float* row = c + i * ldc;
        _mm512_storeu_ps(row, _mm512_add_ps(_mm512_loadu_ps(row), acc[i][0]));
        _mm512_storeu_ps(row + 16, _mm512_add_ps(_mm512_loadu_ps(row + 16), acc[i][1]));
      }
      return;
    }
    alignas(64) float tile[MR * NR];
    for (int i = 0; i < MR; ++i) {
      _mm512_store_ps(tile + i * NR, acc[i][0]);
      _mm512_store_ps(tile + i * NR + 16, acc[i][1]);
    }
    for (int i = 0; i < mr; ++i) {
      float* row = c + i * ldc;
      for (int j = 0; j < nr; ++j) row[j] += tile[i * NR + j];
    }
  }
};

}  // namespace

void sgemm_avx512(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                  float alpha, const float* a, std::int64_t lda, const float* b,
                  std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  gemm_blocked<Avx512Kernel>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace tempo::simd::detail
