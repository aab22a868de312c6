#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "tempo/simd/gemm.hpp"

namespace tempo::simd {

namespace detail {

void sgemm_avx2(bool, bool, std::int64_t, std::int64_t, std::int64_t, float, const float*,
                std::int64_t, const float*, std::int64_t, float, float*, std::int64_t);
void sgemm_avx512(bool, bool, std::int64_t, std::int64_t, std::int64_t, float, const float*,
                  std::int64_t, const float*, std::int64_t, float, float*, std::int64_t);

namespace {

// Reference kernel: i-p-j loop order, one rounding per multiply-add.
template <typename T>
void gemm_reference(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                    T alpha, const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta,
                    T* c, std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* row = c + i * ldc;
    if (beta == T(0)) {
      std::fill(row, row + n, T(0));
    } else if (beta != T(1)) {
      for (std::int64_t j = 0; j < n; ++j) row[j] *= beta;
    }
    if (alpha == T(0)) continue;
    for (std::int64_t p = 0; p < k; ++p) {
      const T aip = alpha * (trans_a ? a[p * lda + i] : a[i * lda + p]);
      if (trans_b) {
        for (std::int64_t j = 0; j < n; ++j) row[j] += aip * b[j * ldb + p];
      } else {
        const T* brow = b + p * ldb;
        for (std::int64_t j = 0; j < n; ++j) row[j] += aip * brow[j];
      }
    }
  }
}

bool cpu_has(Isa isa) {
#if defined(__x86_64__) || defined(__i386__)
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    case Isa::Avx512:
      return __builtin_cpu_supports("avx512f") && __builtin_cpu_supports("fma");
  }
  return false;
#else
  return isa == Isa::Scalar;
#endif
}

Isa initial_isa() {
  Isa isa = detected_isa();
  if (const char* env = std::getenv("TEMPO_ISA")) {
    const std::string name(env);
    if (name == "scalar") isa = Isa::Scalar;
    if (name == "avx2" && cpu_has(Isa::Avx2)) isa = Isa::Avx2;
    if (name == "avx512" && cpu_has(Isa::Avx512)) isa = Isa::Avx512;
  }
  return isa;
}

std::atomic<Isa>& active_slot() {
  static std::atomic<Isa> slot{initial_isa()};
  return slot;
}

}  // namespace
}  // namespace detail

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return "scalar";
    case Isa::Avx2:
      return "avx2";
    case Isa::Avx512:
      return "avx512";
  }
  return "unknown";
}

bool isa_supported(Isa isa) { return detail::cpu_has(isa); }

Isa detected_isa() {
  if (detail::cpu_has(Isa::Avx512)) return Isa::Avx512;
  if (detail::cpu_has(Isa::Avx2)) return Isa::Avx2;
  return Isa::Scalar;
}

Isa active_isa() { return detail::active_slot().load(std::memory_order_relaxed); }

void set_isa(Isa isa) {
  if (!detail::cpu_has(isa)) {
    throw std::invalid_argument("gemm tier not supported on this CPU: " +
                                std::string(isa_name(isa)));
  }
  detail::active_slot().store(isa, std::memory_order_relaxed);
}

void sgemm_with(Isa isa, bool trans_a, bool trans_b, std::int64_t m, std::int64_t n,
                std::int64_t k, float alpha, const float* a, std::int64_t lda, const float* b,
                std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  switch (isa) {
    case Isa::Avx512:
      detail::sgemm_avx512(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
      return;
    case Isa::Avx2:
      detail::sgemm_avx2(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
      return;
    case Isa::Scalar:
      break;
  }
  detail::gemm_reference<float>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void sgemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
           float alpha, const float* a, std::int64_t lda, const float* b, std::int64_t ldb,
           float beta, float* c, std::int64_t ldc) {
  sgemm_with(active_isa(), trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void dgemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
           double alpha, const double* a, std::int64_t lda, const double* b, std::int64_t ldb,
           double beta, double* c, std::int64_t ldc) {
  detail::gemm_reference<double>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c,
                                 ldc);
}

}  // namespace tempo::simd
