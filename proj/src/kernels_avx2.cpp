// Compiled with -mavx2 -mfma. Only reached after a runtime CPU check.
#include "prunelab/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>

namespace prunelab::kernels {
namespace {

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot_avx2(std::size_t n, const double* a, const double* b) {
  __m256d s0 = _mm256_setzero_pd();
  __m256d s1 = _mm256_setzero_pd();
  __m256d s2 = _mm256_setzero_pd();
  __m256d s3 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
    s1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), s1);
    s2 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 8), _mm256_loadu_pd(b + i + 8), s2);
    s3 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 12), _mm256_loadu_pd(b + i + 12), s3);
  }
  for (; i + 4 <= n; i += 4) {
    s0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), s0);
  }
  double s = hsum(_mm256_add_pd(_mm256_add_pd(s0, s1), _mm256_add_pd(s2, s3)));
  for (; i < n; ++i) s += a[i] * b[i];
  return s;
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

// R rows of C (starting at row i0) against all N columns. Element (i, p) of
// the left operand lives at a[i * row_stride + p * col_stride], which covers
// both the plain and the transposed left operand.
template <int R>
void row_block(std::size_t i0, std::size_t k, std::size_t n, const double* a,
               std::size_t row_stride, std::size_t col_stride, const double* b,
               double* c) {
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    __m256d acc[R][2];
    for (int r = 0; r < R; ++r) {
      acc[r][0] = _mm256_loadu_pd(c + (i0 + r) * n + j);
      acc[r][1] = _mm256_loadu_pd(c + (i0 + r) * n + j + 4);
    }
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
      const __m256d b1 = _mm256_loadu_pd(b + p * n + j + 4);
      for (int r = 0; r < R; ++r) {
        const __m256d av = _mm256_broadcast_sd(a + (i0 + r) * row_stride + p * col_stride);
        acc[r][0] = _mm256_fmadd_pd(av, b0, acc[r][0]);
        acc[r][1] = _mm256_fmadd_pd(av, b1, acc[r][1]);
      }
    }
    for (int r = 0; r < R; ++r) {
      _mm256_storeu_pd(c + (i0 + r) * n + j, acc[r][0]);
      _mm256_storeu_pd(c + (i0 + r) * n + j + 4, acc[r][1]);
    }
  }
  for (; j + 4 <= n; j += 4) {
    __m256d acc[R];
    for (int r = 0; r < R; ++r) acc[r] = _mm256_loadu_pd(c + (i0 + r) * n + j);
    for (std::size_t p = 0; p < k; ++p) {
      const __m256d b0 = _mm256_loadu_pd(b + p * n + j);
      for (int r = 0; r < R; ++r) {
        const __m256d av = _mm256_broadcast_sd(a + (i0 + r) * row_stride + p * col_stride);
        acc[r] = _mm256_fmadd_pd(av, b0, acc[r]);
      }
    }
    for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + (i0 + r) * n + j, acc[r]);
  }
  for (; j < n; ++j) {
    for (int r = 0; r < R; ++r) {
      double s = c[(i0 + r) * n + j];
      for (std::size_t p = 0; p < k; ++p) {
        s += a[(i0 + r) * row_stride + p * col_stride] * b[p * n + j];
      }
      c[(i0 + r) * n + j] = s;
    }
  }
}

void gemm_strided(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  std::size_t row_stride, std::size_t col_stride, const double* b,
                  double* c) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) row_block<4>(i, k, n, a, row_stride, col_stride, b, c);
  switch (m - i) {
    case 3: row_block<3>(i, k, n, a, row_stride, col_stride, b, c); break;
    case 2: row_block<2>(i, k, n, a, row_stride, col_stride, b, c); break;
    case 1: row_block<1>(i, k, n, a, row_stride, col_stride, b, c); break;
    default: break;
  }
}

void gemm_nn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  gemm_strided(m, k, n, a, k, 1, b, c);
}

void gemm_tn_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  gemm_strided(m, k, n, a, 1, m, b, c);
}

void gemm_nt_avx2(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double* b0 = b + j * k;
      const double* b1 = b0 + k;
      const double* b2 = b1 + k;
      const double* b3 = b2 + k;
      __m256d s0 = _mm256_setzero_pd();
      __m256d s1 = _mm256_setzero_pd();
      __m256d s2 = _mm256_setzero_pd();
      __m256d s3 = _mm256_setzero_pd();
      std::size_t p = 0;
      for (; p + 4 <= k; p += 4) {
        const __m256d av = _mm256_loadu_pd(arow + p);
        s0 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b0 + p), s0);
        s1 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b1 + p), s1);
        s2 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b2 + p), s2);
        s3 = _mm256_fmadd_pd(av, _mm256_loadu_pd(b3 + p), s3);
      }
      double r0 = hsum(s0), r1 = hsum(s1), r2 = hsum(s2), r3 = hsum(s3);
      for (; p < k; ++p) {
        r0 += arow[p] * b0[p];
        r1 += arow[p] * b1[p];
        r2 += arow[p] * b2[p];
        r3 += arow[p] * b3[p];
      }
      double* crow = c + i * n + j;
      crow[0] += r0;
      crow[1] += r1;
      crow[2] += r2;
      crow[3] += r3;
    }
    for (; j < n; ++j) c[i * n + j] += dot_avx2(k, arow, b + j * k);
  }
}

}  // namespace

const KernelTable* avx2_table() {
  static const KernelTable table{Backend::kAvx2, dot_avx2,     axpy_avx2,
                                 gemm_nn_avx2,   gemm_nt_avx2, gemm_tn_avx2};
  return &table;
}

}  // namespace prunelab::kernels

#else

namespace prunelab::kernels {
const KernelTable* avx2_table() { return nullptr; }
}  // namespace prunelab::kernels

#endif
