#pragma once

// Dense numeric kernels behind the autodiff primitives.
//
// Every kernel has an OpenMP version (namespace kernels) and a plain serial
// reference (namespace kernels::serial) kept for testing. The parallel
// versions split work over independent output rows only; each output element
// is reduced in the same fixed order regardless of thread count, so results
// are bitwise reproducible across OMP_NUM_THREADS settings.

#include <cstddef>

namespace optolab::kernels {

/// C[m,n] (+)= op(A)[m,k] * op(B)[k,n], row-major.
/// trans_a: A is stored [k,m]. trans_b: B is stored [n,k].
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);

/// Row-wise softmax over the last axis of `rows` rows of width `cols`.
/// With `causal`, row r of every cols-row block keeps columns <= (r mod cols);
/// masked entries are written as exactly 0. Max-subtracted for stability.
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const double* in, double* out);

/// Adjoint of softmax_rows: dx = p * (dy - sum(dy * p)).
void softmax_rows_backward(std::size_t rows, std::size_t cols, const double* p, const double* dy,
                           double* dx);

/// Layer normalization over rows of width `cols`. Writes the normalized,
/// un-affined values to `xhat` and per-row inverse std to `inv_std`.
void layernorm_rows(std::size_t rows, std::size_t cols, double eps, const double* x,
                    const double* gain, const double* bias, double* out, double* xhat,
                    double* inv_std);

/// Work-size threshold (m*n*k) under which kernels stay single-threaded.
std::size_t parallel_threshold();
void set_parallel_threshold(std::size_t work);

namespace serial {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate);
void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const double* in, double* out);
void softmax_rows_backward(std::size_t rows, std::size_t cols, const double* p, const double* dy,
                           double* dx);
void layernorm_rows(std::size_t rows, std::size_t cols, double eps, const double* x,
                    const double* gain, const double* bias, double* out, double* xhat,
                    double* inv_std);

}  // namespace serial

}  // namespace optolab::kernels
