#pragma once

#include <cstdint>
#include <string_view>

namespace tempo::simd {

// Instruction-set tiers for the float GEMM. Scalar is the reference path and
// is always available; the vector tiers are picked at runtime from cpuid.
enum class Isa { Scalar, Avx2, Avx512 };

std::string_view isa_name(Isa isa);

// Best tier supported by both the binary and the host CPU.
Isa detected_isa();

// Tier currently used by sgemm. Defaults to detected_isa(), can be overridden
// with set_isa() or the TEMPO_ISA environment variable (scalar|avx2|avx512).
Isa active_isa();

// Throws std::invalid_argument if the host cannot run `isa`.
void set_isa(Isa isa);

bool isa_supported(Isa isa);

// Row-major C[M,N] = alpha * op(A)[M,K] * op(B)[K,N] + beta * C.
// op(A) is A (lda >= K) or A^T (A stored K x M, lda >= M); same for B.
// When beta == 0, C is overwritten without being read.
void sgemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
           float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
           float beta, float* c, std::int64_t ldc);

// Explicit-tier entry point used by the equivalence tests and the benchmark.
void sgemm_with(Isa isa, bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
                std::int64_t k, float alpha, const float* a, std::int64_t lda, const float* b,
                std::int64_t ldb, float beta, float* c, std::int64_t ldc);

// Double precision is only used for gradient checking; always scalar.
void dgemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
           double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
           double beta, double* c, std::int64_t ldc);

template <typename T>
inline void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                 T alpha, const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta,
                 T* c, std::int64_t ldc) {
  if constexpr (sizeof(T) == sizeof(float)) {
    sgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    dgemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

}  // namespace tempo::simd
