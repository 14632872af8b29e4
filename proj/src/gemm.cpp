#include "gemm.hpp"

#include <cstring>

#ifdef C3S_HAVE_CBLAS
#include <cblas.h>
#endif

namespace c3s {
namespace backend {

#ifdef C3S_HAVE_CBLAS

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

const char* gemm_backend_name() { return "cblas"; }

#else

namespace {

void scale_c(double* c, int64_t m, int64_t n, int64_t ldc, double beta) {
  if (beta == 1.0) return;
  for (int64_t i = 0; i < m; ++i) {
    double* row = c + i * ldc;
    if (beta == 0.0) {
      std::memset(row, 0, static_cast<size_t>(n) * sizeof(double));
    } else {
      for (int64_t j = 0; j < n; ++j) row[j] *= beta;
    }
  }
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc) {
  if (m == 0 || n == 0) return;
  scale_c(c, m, n, ldc, beta);
  if (k == 0 || alpha == 0.0) return;

  if (!trans_a && !trans_b) {
    // C[i,:] += alpha * A[i,l] * B[l,:]
#pragma omp parallel for schedule(static) if (m * n * k > (1 << 16))
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      const double* arow = a + i * lda;
      for (int64_t l = 0; l < k; ++l) {
        double av = alpha * arow[l];
        const double* brow = b + l * ldb;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    // C[i,j] += alpha * dot(A[i,:], B[j,:])
#pragma omp parallel for schedule(static) if (m * n * k > (1 << 16))
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      const double* arow = a + i * lda;
      for (int64_t j = 0; j < n; ++j) {
        const double* brow = b + j * ldb;
        double acc = 0.0;
        for (int64_t l = 0; l < k; ++l) acc += arow[l] * brow[l];
        crow[j] += alpha * acc;
      }
    }
  } else if (trans_a && !trans_b) {
    // C[i,:] += alpha * A[l,i] * B[l,:]
    for (int64_t l = 0; l < k; ++l) {
      const double* arow = a + l * lda;
      const double* brow = b + l * ldb;
      for (int64_t i = 0; i < m; ++i) {
        double av = alpha * arow[i];
        double* crow = c + i * ldc;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (int64_t i = 0; i < m; ++i) {
      double* crow = c + i * ldc;
      for (int64_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int64_t l = 0; l < k; ++l) acc += a[l * lda + i] * b[j * ldb + l];
        crow[j] += alpha * acc;
      }
    }
  }
}

const char* gemm_backend_name() { return "builtin"; }

#endif

}  // namespace backend
}  // namespace c3s
