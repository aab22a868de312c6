// AVX2 + FMA tier.

#include <immintrin.h>

#include <cstdint>

#include "gemm_driver.hpp"

namespace tempo::simd::detail {

namespace {

struct Avx2Kernel {
  static constexpr int MR = 6;
  static constexpr int NR = 16;
  static constexpr std::int64_t KC = 256;
  static constexpr std::int64_t MC = MR * 24;
  static constexpr std::int64_t NC = 2048;

  static void run(std::int64_t kc, const float* a, const float* b, float* c, std::int64_t ldc,
                  int mr, int nr) {
    __m256 acc[MR][2];
#pragma GCC unroll 6
    for (int i = 0; i < MR; ++i) {
      acc[i][0] = _mm256_setzero_ps();
      acc[i][1] = _mm256_setzero_ps();
    }
    for (std::int64_t p = 0; p < kc; ++p) {
      const __m256 b0 = _mm256_load_ps(b);
      const __m256 b1 = _mm256_load_ps(b + 8);
#pragma GCC unroll 6
      for (int i = 0; i < MR; ++i) {
        const __m256 av = _mm256_broadcast_ss(a + i);
        acc[i][0] = _mm256_fmadd_ps(av, b0, acc[i][0]);
        acc[i][1] = _mm256_fmadd_ps(av, b1, acc[i][1]);
      }
      a += MR;
      b += NR;
    }
    if (mr == MR && nr == NR) {
#pragma GCC unroll 6
      for (int i = 0; i < MR; ++i) {
        float* row = c + i * ldc;
        _mm256_storeu_ps(row, _mm256_add_ps(_mm256_loadu_ps(row), acc[i][0]));
        _mm256_storeu_ps(row + 8, _mm256_add_ps(_mm256_loadu_ps(row + 8), acc[i][1]));
      }
      return;
    }
    alignas(32) float tile[MR * NR];
    for (int i = 0; i < MR; ++i) {
      _mm256_store_ps(tile + i * NR, acc[i][0]);
      _mm256_store_ps(tile + i * NR + 8, acc[i][1]);
    }
    for (int i = 0; i < mr; ++i) {
      float* row = c + i * ldc;
      for (int j = 0; j < nr; ++j) row[j] += tile[i * NR + j];
    }
  }
};

}  // namespace

void sgemm_avx2(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
                float beta, float* c, std::int64_t ldc) {
  gemm_blocked<Avx2Kernel>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

}  // namespace tempo::simd::detail
