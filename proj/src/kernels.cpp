#include "optolab/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

namespace optolab::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 18};

inline double at_a(const double* a, bool trans, std::size_t m, std::size_t k, std::size_t i,
                   std::size_t p) {
    return trans ? a[p * m + i] : a[i * k + p];
}

// One output row of gemm. Accumulation runs over p = 0..k-1 in order.
inline void gemm_row(bool trans_a, bool trans_b, std::size_t i, std::size_t m, std::size_t n,
                     std::size_t k, const double* a, const double* b, double* c,
                     bool accumulate, double* scratch) {
    double* crow = c + i * n;
    if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            if (trans_a) {
                for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * brow[p];
            } else {
                const double* arow = a + i * k;
                for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            }
            crow[j] = accumulate ? crow[j] + s : s;
        }
        return;
    }
    std::fill(scratch, scratch + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
        const double av = at_a(a, trans_a, m, k, i, p);
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) scratch[j] += av * brow[j];
    }
    if (accumulate) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += scratch[j];
    } else {
        std::copy(scratch, scratch + n, crow);
    }
}

inline void softmax_row(std::size_t r, std::size_t cols, bool causal, const double* in,
                        double* out) {
    const double* x = in + r * cols;
    double* y = out + r * cols;
    const std::size_t live = causal ? (r % cols) + 1 : cols;
    double mx = x[0];
    for (std::size_t j = 1; j < live; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < live; ++j) {
        y[j] = std::exp(x[j] - mx);
        z += y[j];
    }
    for (std::size_t j = 0; j < live; ++j) y[j] /= z;
    for (std::size_t j = live; j < cols; ++j) y[j] = 0.0;
}

inline void softmax_row_backward(std::size_t r, std::size_t cols, const double* p,
                                 const double* dy, double* dx) {
    const double* pr = p + r * cols;
    const double* gr = dy + r * cols;
    double* out = dx + r * cols;
    double dot = 0.0;
    for (std::size_t j = 0; j < cols; ++j) dot += pr[j] * gr[j];
    for (std::size_t j = 0; j < cols; ++j) out[j] = pr[j] * (gr[j] - dot);
}

inline void layernorm_row(std::size_t r, std::size_t cols, double eps, const double* x,
                          const double* gain, const double* bias, double* out, double* xhat,
                          double* inv_std) {
    const double* xr = x + r * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
        const double d = xr[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < cols; ++j) {
        const double h = (xr[j] - mean) * is;
        xhat[r * cols + j] = h;
        out[r * cols + j] = h * gain[j] + bias[j];
    }
}

}  // namespace

std::size_t parallel_threshold() { return g_threshold.load(); }
void set_parallel_threshold(std::size_t work) { g_threshold.store(work); }

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
    const bool par = m * n * k >= g_threshold.load() && m > 1;
#pragma omp parallel if (par)
    {
        std::vector<double> scratch(n);
#pragma omp for schedule(static)
        for (std::size_t i = 0; i < m; ++i) {
            gemm_row(trans_a, trans_b, i, m, n, k, a, b, c, accumulate, scratch.data());
        }
    }
}

void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const double* in,
                  double* out) {
    const bool par = rows * cols * 8 >= g_threshold.load();
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t r = 0; r < rows; ++r) softmax_row(r, cols, causal, in, out);
}

void softmax_rows_backward(std::size_t rows, std::size_t cols, const double* p, const double* dy,
                           double* dx) {
    const bool par = rows * cols * 8 >= g_threshold.load();
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(r, cols, p, dy, dx);
}

void layernorm_rows(std::size_t rows, std::size_t cols, double eps, const double* x,
                    const double* gain, const double* bias, double* out, double* xhat,
                    double* inv_std) {
    const bool par = rows * cols * 8 >= g_threshold.load();
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t r = 0; r < rows; ++r) {
        layernorm_row(r, cols, eps, x, gain, bias, out, xhat, inv_std);
    }
}

namespace serial {

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
          const double* a, const double* b, double* c, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = trans_a ? a[p * m + i] : a[i * k + p];
                const double bv = trans_b ? b[j * k + p] : b[p * n + j];
                s += av * bv;
            }
            c[i * n + j] = accumulate ? c[i * n + j] + s : s;
        }
    }
}

void softmax_rows(std::size_t rows, std::size_t cols, bool causal, const double* in,
                  double* out) {
    for (std::size_t r = 0; r < rows; ++r) softmax_row(r, cols, causal, in, out);
}

void softmax_rows_backward(std::size_t rows, std::size_t cols, const double* p, const double* dy,
                           double* dx) {
    for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(r, cols, p, dy, dx);
}

void layernorm_rows(std::size_t rows, std::size_t cols, double eps, const double* x,
                    const double* gain, const double* bias, double* out, double* xhat,
                    double* inv_std) {
    for (std::size_t r = 0; r < rows; ++r) {
        layernorm_row(r, cols, eps, x, gain, bias, out, xhat, inv_std);
    }
}

}  // namespace serial

}  // namespace optolab::kernels
