#include "prunelab/kernels.hpp"

#if defined(__aarch64__)
#include <arm_neon.h>

namespace prunelab::kernels {
namespace {

double dot_neon(std::size_t n, const double* a, const double* b) {
  float64x2_t s0 = vdupq_n_f64(0.0);
  float64x2_t s1 = vdupq_n_f64(0.0);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 = vfmaq_f64(s0, vld1q_f64(a + i), vld1q_f64(b + i));
    s1 = vfmaq_f64(s1, vld1q_f64(a + i + 2), vld1q_f64(b + i + 2));
  }
  double s = vaddvq_f64(vaddq_f64(s0, s1));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_neon(std::size_t n, double alpha, const double* x, double* y) {
  const float64x2_t va = vdupq_n_f64(alpha);
  std::size_t i = 0;
  for (; i + 2 <= n; i += 2) vst1q_f64(y + i, vfmaq_f64(vld1q_f64(y + i), va, vld1q_f64(x + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void gemm_nn_neon(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) axpy_neon(n, a[i * k + p], b + p * n, c + i * n);
  }
}

void gemm_nt_neon(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot_neon(k, a + i * k, b + j * k);
  }
}

void gemm_tn_neon(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) axpy_neon(n, a[p * m + i], b + p * n, c + i * n);
  }
}

}  // namespace

const KernelTable* neon_table() {
  static const KernelTable table{Backend::kNeon, dot_neon,     axpy_neon,
                                 gemm_nn_neon,   gemm_nt_neon, gemm_tn_neon};
  return &table;
}

}  // namespace prunelab::kernels

#else

namespace prunelab::kernels {
const KernelTable* neon_table() { return nullptr; }
}  // namespace prunelab::kernels

#endif
