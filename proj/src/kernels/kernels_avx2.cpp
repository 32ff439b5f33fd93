// AVX2/FMA variants of the inner-loop kernels. Compiled with -mavx2 -mfma;
// only dispatched to when the running CPU reports AVX2 support.

#include <immintrin.h>

#include <cstddef>

#include "sami/kernels.hpp"

namespace sami::kernels {

namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d swapped = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, swapped));
}

double dot_avx2(const double* a, const double* b, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot_f32_avx2(const float* w, const double* x, size_t n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256d w0 = _mm256_cvtps_pd(_mm_loadu_ps(w + i));
    __m256d w1 = _mm256_cvtps_pd(_mm_loadu_ps(w + i + 4));
    acc0 = _mm256_fmadd_pd(w0, _mm256_loadu_pd(x + i), acc0);
    acc1 = _mm256_fmadd_pd(w1, _mm256_loadu_pd(x + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4) {
    __m256d w0 = _mm256_cvtps_pd(_mm_loadu_ps(w + i));
    acc0 = _mm256_fmadd_pd(w0, _mm256_loadu_pd(x + i), acc0);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += static_cast<double>(w[i]) * x[i];
  return acc;
}

void axpy_avx2(double a, const double* x, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vy = _mm256_loadu_pd(y + i);
    vy = _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), vy);
    _mm256_storeu_pd(y + i, vy);
  }
  for (; i < n; ++i) y[i] += a * x[i];
}

void axpy_f32_avx2(double a, const float* w, double* y, size_t n) {
  const __m256d va = _mm256_set1_pd(a);
  size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    __m256d vw = _mm256_cvtps_pd(_mm_loadu_ps(w + i));
    __m256d vy = _mm256_loadu_pd(y + i);
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, vw, vy));
  }
  for (; i < n; ++i) y[i] += a * static_cast<double>(w[i]);
}

void matvec_f32_avx2(const float* w, const double* x, double* y, size_t rows,
                     size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    y[r] = dot_f32_avx2(w + r * cols, x, cols);
  }
}

constexpr Backend kAvx2{
    "avx2", dot_avx2, dot_f32_avx2, axpy_avx2, axpy_f32_avx2, matvec_f32_avx2,
};

}  // namespace

const Backend* avx2_backend() {
  static const bool supported = __builtin_cpu_supports("avx2") &&
                                __builtin_cpu_supports("fma");
  return supported ? &kAvx2 : nullptr;
}

}  // namespace sami::kernels
