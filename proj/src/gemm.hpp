#pragma once

#include <cstdint>

namespace c3s {
namespace backend {

// Row-major general matrix multiply:
//   C[m x n] = alpha * op(A) * op(B) + beta * C
// op(X) = X or X^T depending on the trans flag; lda/ldb/ldc are the stored
// row strides. Dispatches to CBLAS when built with C3S_HAVE_CBLAS, otherwise
// uses the built-in kernel. Both paths are run-to-run deterministic for a
// fixed thread count.
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
          double alpha, const double* a, int64_t lda, const double* b,
          int64_t ldb, double beta, double* c, int64_t ldc);

// "cblas" or "builtin"; surfaced in logs for reproducibility notes.
const char* gemm_backend_name();

}  // namespace backend
}  // namespace c3s
