// Copyright 2026 The mhmoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>

#if defined(MHMOE_USE_LIBMVEC) && defined(__AVX512F__)
#include <immintrin.h>
extern "C" __m512d _ZGVeN8v_erf(__m512d);
extern "C" __m512d _ZGVeN8v_exp(__m512d);
#define MHMOE_VECTOR_ERF 1
#endif

// Exact (erf-based) GELU over contiguous buffers. With glibc's vector math
// library every element, tails included, goes through the same 8-lane path.
namespace mhmoe::vmath {

inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// out[i] = 0.5 x (1 + erf(x / sqrt 2))
inline void gelu(const double* x, double* out, std::size_t n) {
#ifdef MHMOE_VECTOR_ERF
  const __m512d half = _mm512_set1_pd(0.5), one = _mm512_set1_pd(1.0), c = _mm512_set1_pd(kInvSqrt2);
  for (std::size_t i = 0; i < n; i += 8) {
    const __mmask8 m = n - i >= 8 ? 0xFF : static_cast<__mmask8>((1u << (n - i)) - 1);
    const __m512d v = _mm512_maskz_loadu_pd(m, x + i);
    const __m512d e = _ZGVeN8v_erf(_mm512_mul_pd(v, c));
    _mm512_mask_storeu_pd(out + i, m, _mm512_mul_pd(_mm512_mul_pd(half, v), _mm512_add_pd(one, e)));
  }
#else
  for (std::size_t i = 0; i < n; ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
#endif
}

// gx[i] = go[i] * gelu'(x[i]), overwriting gx.
inline void gelu_backward(const double* x, const double* go, double* gx, std::size_t n) {
#ifdef MHMOE_VECTOR_ERF
  const __m512d half = _mm512_set1_pd(0.5), one = _mm512_set1_pd(1.0), c = _mm512_set1_pd(kInvSqrt2);
  const __m512d mhalf = _mm512_set1_pd(-0.5), s = _mm512_set1_pd(kInvSqrt2Pi);
  for (std::size_t i = 0; i < n; i += 8) {
    const __mmask8 m = n - i >= 8 ? 0xFF : static_cast<__mmask8>((1u << (n - i)) - 1);
    const __m512d v = _mm512_maskz_loadu_pd(m, x + i);
    const __m512d g = _mm512_maskz_loadu_pd(m, go + i);
    const __m512d cdf = _mm512_mul_pd(half, _mm512_add_pd(one, _ZGVeN8v_erf(_mm512_mul_pd(v, c))));
    const __m512d pdf = _mm512_mul_pd(s, _ZGVeN8v_exp(_mm512_mul_pd(mhalf, _mm512_mul_pd(v, v))));
    const __m512d d = _mm512_add_pd(cdf, _mm512_mul_pd(v, pdf));
    _mm512_mask_storeu_pd(gx + i, m, _mm512_mul_pd(g, d));
  }
#else
  for (std::size_t i = 0; i < n; ++i) {
    const double v = x[i];
    const double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * std::exp(-0.5 * v * v) * kInvSqrt2Pi;
    gx[i] = go[i] * d;
  }
#endif
}

}  // namespace mhmoe::vmath
