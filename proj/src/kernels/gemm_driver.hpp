#pragma once

// Blocked GEMM driver shared by the vector tiers. Each ISA translation unit
// includes this header, so packing code is compiled with that unit's target
// flags. The microkernel contract:
//
//   Kernel::run(kc, a_panel, b_panel, c, ldc, mr, nr)
//
// accumulates the (MR x NR) product of a packed A panel (kc steps of MR
// values) and a packed B panel (kc steps of NR values) into the top-left
// (mr x nr) corner of C.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <new>

namespace tempo::simd::detail {

struct AlignedFree {
  void operator()(float* p) const noexcept { std::free(p); }
};

class PackBuffer {
 public:
  float* reserve(std::size_t count) {
    if (count > capacity_) {
      std::size_t bytes = ((count * sizeof(float) + 63) / 64) * 64;
      auto* p = static_cast<float*>(std::aligned_alloc(64, bytes));
      if (p == nullptr) throw std::bad_alloc();
      data_.reset(p);
      capacity_ = count;
    }
    return data_.get();
  }

 private:
  std::unique_ptr<float, AlignedFree> data_;
  std::size_t capacity_ = 0;
};

inline void scale_c(std::int64_t m, std::int64_t n, float beta, float* c, std::int64_t ldc) {
  if (beta == 1.0f) return;
  for (std::int64_t i = 0; i < m; ++i) {
    float* row = c + i * ldc;
    if (beta == 0.0f) {
      std::fill(row, row + n, 0.0f);
    } else {
      for (std::int64_t j = 0; j < n; ++j) row[j] *= beta;
    }
  }
}

// Packs op(A)[ic:ic+mc, pc:pc+kc] * alpha into MR-row panels, zero-padded.
template <int MR>
void pack_a(bool trans, const float* a, std::int64_t lda, std::int64_t ic, std::int64_t pc,
            std::int64_t mc, std::int64_t kc, float alpha, float* out) {
  for (std::int64_t ir = 0; ir < mc; ir += MR) {
    const std::int64_t mr = std::min<std::int64_t>(MR, mc - ir);
    for (std::int64_t p = 0; p < kc; ++p) {
      float* dst = out + p * MR;
      if (trans) {
        const float* src = a + (pc + p) * lda + ic + ir;
        for (std::int64_t i = 0; i < mr; ++i) dst[i] = alpha * src[i];
      } else {
        const float* src = a + (ic + ir) * lda + pc + p;
        for (std::int64_t i = 0; i < mr; ++i) dst[i] = alpha * src[i * lda];
      }
      for (std::int64_t i = mr; i < MR; ++i) dst[i] = 0.0f;
    }
    out += kc * MR;
  }
}

// Packs op(B)[pc:pc+kc, jc:jc+nc] into NR-column panels, zero-padded.
template <int NR>
void pack_b(bool trans, const float* b, std::int64_t ldb, std::int64_t pc, std::int64_t jc,
            std::int64_t kc, std::int64_t nc, float* out) {
  for (std::int64_t jr = 0; jr < nc; jr += NR) {
    const std::int64_t nr = std::min<std::int64_t>(NR, nc - jr);
    if (trans) {
      for (std::int64_t p = 0; p < kc; ++p) {
        float* dst = out + p * NR;
        const float* src = b + (jc + jr) * ldb + pc + p;
        for (std::int64_t j = 0; j < nr; ++j) dst[j] = src[j * ldb];
        for (std::int64_t j = nr; j < NR; ++j) dst[j] = 0.0f;
      }
    } else {
      for (std::int64_t p = 0; p < kc; ++p) {
        float* dst = out + p * NR;
        const float* src = b + (pc + p) * ldb + jc + jr;
        for (std::int64_t j = 0; j < nr; ++j) dst[j] = src[j];
        for (std::int64_t j = nr; j < NR; ++j) dst[j] = 0.0f;
      }
    }
    out += kc * NR;
  }
}

template <class Kernel>
void gemm_blocked(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k,
                  float alpha, const float* a, std::int64_t lda, const float* b,
                  std::int64_t ldb, float beta, float* c, std::int64_t ldc) {
  constexpr int MR = Kernel::MR;
  constexpr int NR = Kernel::NR;
  constexpr std::int64_t KC = Kernel::KC;
  constexpr std::int64_t MC = Kernel::MC;
  constexpr std::int64_t NC = Kernel::NC;

  scale_c(m, n, beta, c, ldc);
  if (m == 0 || n == 0 || k == 0 || alpha == 0.0f) return;

  thread_local PackBuffer a_buf;
  thread_local PackBuffer b_buf;

  for (std::int64_t jc = 0; jc < n; jc += NC) {
    const std::int64_t nc = std::min(NC, n - jc);
    const std::int64_t nc_padded = (nc + NR - 1) / NR * NR;
    for (std::int64_t pc = 0; pc < k; pc += KC) {
      const std::int64_t kc = std::min(KC, k - pc);
      float* bp = b_buf.reserve(static_cast<std::size_t>(kc * nc_padded));
      pack_b<NR>(trans_b, b, ldb, pc, jc, kc, nc, bp);
      for (std::int64_t ic = 0; ic < m; ic += MC) {
        const std::int64_t mc = std::min(MC, m - ic);
        const std::int64_t mc_padded = (mc + MR - 1) / MR * MR;
        float* ap = a_buf.reserve(static_cast<std::size_t>(kc * mc_padded));
        pack_a<MR>(trans_a, a, lda, ic, pc, mc, kc, alpha, ap);
        for (std::int64_t jr = 0; jr < nc; jr += NR) {
          const int nr = static_cast<int>(std::min<std::int64_t>(NR, nc - jr));
          const float* b_panel = bp + (jr / NR) * kc * NR;
          for (std::int64_t ir = 0; ir < mc; ir += MR) {
            const int mr = static_cast<int>(std::min<std::int64_t>(MR, mc - ir));
            const float* a_panel = ap + (ir / MR) * kc * MR;
            Kernel::run(kc, a_panel, b_panel, c + (ic + ir) * ldc + jc + jr, ldc, mr, nr);
          }
        }
      }
    }
  }
}

}  // namespace tempo::simd::detail
