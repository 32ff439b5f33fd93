#pragma once

#include <cstddef>
#include <string_view>

namespace sami::kernels {

// Inner-loop primitives of the model's forward/backward passes.
// Parameters are stored as f32; all arithmetic runs in f64, so the f32
// variants widen on load. Every entry point has a scalar reference
// implementation and may have SIMD variants; the active backend is chosen
// once per process (CPU probe, overridable) and the variants are
// equivalence-tested against the scalar reference.
struct Backend {
  const char* name;

  // sum_i a[i] * b[i]
  double (*dot)(const double* a, const double* b, size_t n);
  // sum_i w[i] * x[i], widening w
  double (*dot_f32)(const float* w, const double* x, size_t n);
  // y[i] += a * x[i]
  void (*axpy)(double a, const double* x, double* y, size_t n);
  // y[i] += a * w[i], widening w
  void (*axpy_f32)(double a, const float* w, double* y, size_t n);
  // y[r] = sum_c w[r*cols + c] * x[c]   (row-major W, rows x cols)
  void (*matvec_f32)(const float* w, const double* x, double* y, size_t rows,
                     size_t cols);
};

const Backend& scalar_backend();

// Null when not compiled in or the CPU lacks AVX2.
const Backend* avx2_backend();

// The process-wide backend: best available unless overridden by
// force_backend() or the SAMI_KERNEL_BACKEND environment variable
// ("scalar" or "avx2"), checked once on first use.
const Backend& active();

// Throws ValidationError for unknown/unavailable names.
void force_backend(std::string_view name);

}  // namespace sami::kernels
