// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

// Dense float64 GEMM: B is packed into kNr-column slivers, A is read in
// place, and an 8x16 register tile accumulates straight into C.
//
// For each output element the inner index runs in ascending order, chained
// onto C's current value. The order depends only on the problem shape, so
// repeated calls are bit-identical.
namespace mhmoe::kernels {

inline constexpr std::size_t kMr = 8;
inline constexpr std::size_t kNr = 16;
inline constexpr std::size_t kKc = 256;
inline constexpr std::size_t kKcStrided = 32;
inline constexpr std::size_t kBResident = std::size_t{1} << 20;

// Strided view of a logical [rows x cols] operand.
struct View {
  const double* p;
  std::size_t rs;  // row stride
  std::size_t cs;  // column stride
  double at(std::size_t r, std::size_t c) const { return p[r * rs + c * cs]; }
};

namespace detail {

// Packs rows [t0, t0 + kc) x cols [0, n) of B into kNr-column slivers,
// starting at sliver s0.
inline void pack_b(const View& b, std::size_t t0, std::size_t kc, std::size_t n, double* out, std::size_t s0 = 0) {
  for (std::size_t s = s0; s * kNr < n; ++s) {
    double* dst = out + (s - s0) * kc * kNr;
    const std::size_t cols = std::min(kNr, n - s * kNr);
    if (b.cs == 1) {
      for (std::size_t t = 0; t < kc; ++t) {
        const double* src = b.p + (t0 + t) * b.rs + s * kNr;
        double* d = dst + t * kNr;
        std::memcpy(d, src, cols * sizeof(double));
        for (std::size_t c = cols; c < kNr; ++c) d[c] = 0.0;
      }
    } else {
      for (std::size_t c = 0; c < kNr; ++c) {
        if (c < cols) {
          const double* src = b.p + (s * kNr + c) * b.cs + t0 * b.rs;
          for (std::size_t t = 0; t < kc; ++t) dst[t * kNr + c] = src[t * b.rs];
        } else {
          for (std::size_t t = 0; t < kc; ++t) dst[t * kNr + c] = 0.0;
        }
      }
    }
  }
}

// C[kMr x cols] += A[kMr x kc] * B[kc x kNr]; A(r, t) = a[r * rs + t * cs],
// B(t, q) = bp[t * ldb + q].
inline void micro_kernel(std::size_t kc, const double* a, std::size_t rs, std::size_t cs, const double* bp,
                         std::size_t ldb, double* c, std::size_t ldc, std::size_t cols) {
#if defined(__AVX512F__)
  const __mmask8 m0 = cols >= 8 ? 0xFF : static_cast<__mmask8>((1u << cols) - 1);
  const __mmask8 m1 = cols >= 16 ? 0xFF : cols <= 8 ? 0 : static_cast<__mmask8>((1u << (cols - 8)) - 1);
  __m512d c0[kMr], c1[kMr];
  for (std::size_t r = 0; r < kMr; ++r) {
    c0[r] = _mm512_maskz_loadu_pd(m0, c + r * ldc);
    c1[r] = _mm512_maskz_loadu_pd(m1, c + r * ldc + 8);
  }
  for (std::size_t t = 0; t < kc; ++t) {
    const __m512d b0 = _mm512_loadu_pd(bp + t * ldb);
    const __m512d b1 = _mm512_loadu_pd(bp + t * ldb + 8);
    const double* at = a + t * cs;
    for (std::size_t r = 0; r < kMr; ++r) {
      const __m512d av = _mm512_set1_pd(at[r * rs]);
      c0[r] = _mm512_fmadd_pd(av, b0, c0[r]);
      c1[r] = _mm512_fmadd_pd(av, b1, c1[r]);
    }
  }
  for (std::size_t r = 0; r < kMr; ++r) {
    _mm512_mask_storeu_pd(c + r * ldc, m0, c0[r]);
    _mm512_mask_storeu_pd(c + r * ldc + 8, m1, c1[r]);
  }
#else
  double acc[kMr][kNr];
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t q = 0; q < kNr; ++q) acc[r][q] = q < cols ? c[r * ldc + q] : 0.0;
  for (std::size_t t = 0; t < kc; ++t) {
    const double* b = bp + t * ldb;
    for (std::size_t r = 0; r < kMr; ++r) {
      const double av = a[r * rs + t * cs];
      for (std::size_t q = 0; q < kNr; ++q) acc[r][q] += av * b[q];
    }
  }
  for (std::size_t r = 0; r < kMr; ++r)
    for (std::size_t q = 0; q < cols; ++q) c[r * ldc + q] = acc[r][q];
#endif
}

}  // namespace detail

// C[m x n] (row stride ldc) += A[m x k] * B[k x n]
inline void gemm(std::size_t m, std::size_t n, std::size_t k, const View& a, const View& b, double* c,
                 std::size_t ldc) {
  if (m == 0 || n == 0 || k == 0) return;
  const std::size_t n_slivers = (n + kNr - 1) / kNr;
  const std::size_t m_full = m - m % kMr;
  const std::size_t m_edge = m - m_full;
  // Row-major B is read in place except for a ragged last sliver.
  const bool direct_b = b.cs == 1;
  const std::size_t first_packed = direct_b ? n / kNr : 0;
  thread_local std::vector<double> bbuf;
  // Column-strided A touches one page per inner step; short blocks keep those pages hot.
  const std::size_t kcb = a.cs == 1 ? kKc : kKcStrided;
  bbuf.resize((n_slivers - first_packed) * kNr * std::min(k, kcb));
  double aedge[kMr * kKc];
  double cedge[kMr * kNr];

  for (std::size_t t0 = 0; t0 < k; t0 += kcb) {
    const std::size_t kc = std::min(kcb, k - t0);
    if (first_packed < n_slivers) detail::pack_b(b, t0, kc, n, bbuf.data(), first_packed);
    if (m_edge) {
      for (std::size_t t = 0; t < kc; ++t)
        for (std::size_t r = 0; r < kMr; ++r) aedge[t * kMr + r] = r < m_edge ? a.at(m_full + r, t0 + t) : 0.0;
    }
    auto tile = [&](std::size_t i, std::size_t s) {
      const std::size_t j = s * kNr;
      const std::size_t cols = std::min(kNr, n - j);
      const bool packed = s >= first_packed;
      const double* bp = packed ? bbuf.data() + (s - first_packed) * kc * kNr : b.p + t0 * b.rs + j;
      const std::size_t ldb = packed ? kNr : b.rs;
      if (i < m_full) {
        detail::micro_kernel(kc, a.p + i * a.rs + t0 * a.cs, a.rs, a.cs, bp, ldb, c + i * ldc + j, ldc, cols);
        return;
      }
      for (std::size_t r = 0; r < kMr; ++r)
        for (std::size_t q = 0; q < kNr; ++q)
          cedge[r * kNr + q] = r < m_edge && q < cols ? c[(i + r) * ldc + j + q] : 0.0;
      detail::micro_kernel(kc, aedge, 1, kMr, bp, ldb, cedge, kNr, kNr);
      for (std::size_t r = 0; r < m_edge; ++r)
        for (std::size_t q = 0; q < cols; ++q) c[(i + r) * ldc + j + q] = cedge[r * kNr + q];
    };
    // Small B blocks stay cache resident, so sweep C row-wise; otherwise keep
    // one B sliver hot and sweep down its columns.
    if (kc * n * sizeof(double) <= kBResident) {
      for (std::size_t i = 0; i < m; i += kMr)
        for (std::size_t s = 0; s < n_slivers; ++s) tile(i, s);
    } else {
      for (std::size_t s = 0; s < n_slivers; ++s)
        for (std::size_t i = 0; i < m; i += kMr) tile(i, s);
    }
  }
}

// C[m x n] += A[m x k] * B[k x n]
inline void gemm_nn_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  gemm(m, n, k, {a, k, 1}, {b, n, 1}, c, n);
}

// C[m x n] += A[m x k] * B[n x k]^T
inline void gemm_nt_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  gemm(m, n, k, {a, k, 1}, {b, 1, k}, c, n);
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void gemm_tn_acc(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  gemm(k, n, m, {a, 1, k}, {b, n, 1}, c, n);
}

}  // namespace mhmoe::kernels
