#pragma once
// Dense f64 inner loops used by the autograd engine.
//
// Every routine has a portable scalar reference implementation. SIMD variants
// (AVX2+FMA on x86-64, NEON on AArch64) are compiled in separate translation
// units and picked once at startup from the host CPU. PRUNELAB_KERNELS
// (scalar|avx2|neon|auto) overrides the choice.
//
// Matrices are row-major and densely packed. All gemm routines accumulate
// into C; callers zero C when they want a plain product.

#include <cstddef>
#include <string_view>
#include <vector>

namespace prunelab::kernels {

enum class Backend { kScalar, kAvx2, kNeon };

std::string_view backend_name(Backend b);

struct KernelTable {
  Backend backend;
  double (*dot)(std::size_t n, const double* a, const double* b);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // C[MxN] += A[MxK] * B[KxN]
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
  // C[MxN] += A[MxK] * B[NxK]^T
  void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
  // C[MxN] += A[KxM]^T * B[KxN]
  void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c);
};

// Tables for each backend; null when the backend was not compiled in.
const KernelTable& scalar_table();
const KernelTable* avx2_table();
const KernelTable* neon_table();

// Backends that are both compiled in and supported by this CPU.
std::vector<Backend> available_backends();

// The table used by the rest of the library.
const KernelTable& active();

// Switch backends (tests, benchmarking). Throws std::invalid_argument when the
// backend is unavailable on this host.
void set_backend(Backend b);

inline double dot(std::size_t n, const double* a, const double* b) {
  return active().dot(n, a, b);
}
inline void axpy(std::size_t n, double alpha, const double* x, double* y) {
  active().axpy(n, alpha, x, y);
}
inline void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  active().gemm_nn(m, k, n, a, b, c);
}
inline void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  active().gemm_nt(m, k, n, a, b, c);
}
inline void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c) {
  active().gemm_tn(m, k, n, a, b, c);
}

}  // namespace prunelab::kernels
