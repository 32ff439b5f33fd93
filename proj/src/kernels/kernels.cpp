#include "sami/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

#include "sami/error.hpp"

namespace sami::kernels {

namespace {

double dot_scalar(const double* a, const double* b, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

double dot_f32_scalar(const float* w, const double* x, size_t n) {
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += static_cast<double>(w[i]) * x[i];
  return acc;
}

void axpy_scalar(double a, const double* x, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

void axpy_f32_scalar(double a, const float* w, double* y, size_t n) {
  for (size_t i = 0; i < n; ++i) y[i] += a * static_cast<double>(w[i]);
}

void matvec_f32_scalar(const float* w, const double* x, double* y, size_t rows,
                       size_t cols) {
  for (size_t r = 0; r < rows; ++r) {
    y[r] = dot_f32_scalar(w + r * cols, x, cols);
  }
}

constexpr Backend kScalar{
    "scalar", dot_scalar, dot_f32_scalar, axpy_scalar, axpy_f32_scalar,
    matvec_f32_scalar,
};

const Backend* g_forced = nullptr;

const Backend* pick_default() {
  if (const char* env = std::getenv("SAMI_KERNEL_BACKEND")) {
    std::string_view name(env);
    if (name == "scalar") return &kScalar;
    if (name == "avx2" && avx2_backend() != nullptr) return avx2_backend();
    // Unknown or unavailable request in the environment falls back silently;
    // force_backend() is the strict path.
  }
  if (const Backend* b = avx2_backend()) return b;
  return &kScalar;
}

}  // namespace

const Backend& scalar_backend() { return kScalar; }

#if !defined(SAMI_BUILD_AVX2)
const Backend* avx2_backend() { return nullptr; }
#endif

const Backend& active() {
  static std::atomic<const Backend*> chosen{nullptr};
  const Backend* b = g_forced ? g_forced : chosen.load(std::memory_order_acquire);
  if (b == nullptr) {
    b = pick_default();
    chosen.store(b, std::memory_order_release);
  }
  return *b;
}

void force_backend(std::string_view name) {
  if (name == "scalar") {
    g_forced = &kScalar;
    return;
  }
  if (name == "avx2") {
    if (const Backend* b = avx2_backend()) {
      g_forced = b;
      return;
    }
    throw ValidationError("kernel backend 'avx2' is not available on this CPU/build");
  }
  throw ValidationError("unknown kernel backend: " + std::string(name));
}

}  // namespace sami::kernels
