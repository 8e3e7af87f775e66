// Dense row-major float64 tensors plus the raw compute kernels shared by the
// eager (inference) path and the autodiff tape.
//
// Everything is deliberately CPU-only and double precision: the models here
// are desk-scale and the test suite leans on bit-exact reproducibility and
// finite-difference gradient checks, which outrank throughput. Kernels use
// fixed accumulation orders that do not depend on batch size, so a row of a
// batched op is bit-identical to the same row computed alone.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "sicql/rng.hpp"

namespace sicql {

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<int64_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != checked_numel(shape_)) {
            throw TensorError("tensor data length does not match shape");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (double& x : t.data_) x = stddev * rng.normal();
        return t;
    }

    const std::vector<int64_t>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }

    int64_t rows() const { return shape_.empty() ? 0 : shape_[0]; }
    int64_t cols() const {
        if (ndim() == 1) return 1;
        if (ndim() != 2) throw TensorError("cols() requires a 1-D or 2-D tensor");
        return shape_[1];
    }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& at(int64_t i) { return data_[static_cast<size_t>(i)]; }
    double at(int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * shape_[1] + c)]; }
    double at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * shape_[1] + c)]; }

    // Scalar extraction; errors on non-scalar tensors.
    double value() const {
        if (numel() != 1) throw TensorError("value() requires a scalar tensor");
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double x : data_) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

    static int64_t checked_numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) {
            if (d < 0) throw TensorError("negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

namespace kernels {

// ---------------------------------------------------------------------------
// Matrix products. A, B, C row-major. The ikj order streams B and C rows so
// the inner loop vectorizes; accumulation order per output element is a
// function of k alone, which keeps batched results bit-identical to per-row
// results.
// ---------------------------------------------------------------------------

// C (+)= A[m,k] * B[k,n]
inline void matmul(const double* A, const double* B, double* C, int64_t m, int64_t k, int64_t n,
                   bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<size_t>(n));
        const double* a = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const double av = a[p];
            const double* b = B + p * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C (+)= A[m,k] * B[n,k]^T  -- both operands are traversed along contiguous k.
inline void matmul_a_bt(const double* A, const double* B, double* C, int64_t m, int64_t k,
                        int64_t n, bool accumulate) {
    for (int64_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        double* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            int64_t p = 0;
            for (; p + 8 <= k; p += 8) {
                for (int q = 0; q < 8; ++q) acc[q] += a[p + q] * b[p + q];
            }
            double s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
                       ((acc[4] + acc[5]) + (acc[6] + acc[7]));
            for (; p < k; ++p) s += a[p] * b[p];
            if (accumulate) {
                c[j] += s;
            } else {
                c[j] = s;
            }
        }
    }
}

// C (+)= A[k,m]^T * B[k,n]  -- the weight-gradient shape.
inline void matmul_at_b(const double* A, const double* B, double* C, int64_t m, int64_t k,
                        int64_t n, bool accumulate) {
    if (!accumulate) std::memset(C, 0, sizeof(double) * static_cast<size_t>(m * n));
    for (int64_t p = 0; p < k; ++p) {
        const double* a = A + p * m;
        const double* b = B + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const double av = a[i];
            double* c = C + i * n;
#pragma omp simd
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Row-wise nonlinearities.
// ---------------------------------------------------------------------------

inline void softmax_row(const double* x, double* y, int64_t n) {
    double mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
#pragma omp simd reduction(+ : sum)
    for (int64_t j = 0; j < n; ++j) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
    }
    const double inv = 1.0 / sum;
    for (int64_t j = 0; j < n; ++j) y[j] *= inv;
}

inline void log_softmax_row(const double* x, double* y, int64_t n) {
    double mx = x[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
#pragma omp simd reduction(+ : sum)
    for (int64_t j = 0; j < n; ++j) sum += std::exp(x[j] - mx);
    const double lse = mx + std::log(sum);
    for (int64_t j = 0; j < n; ++j) y[j] = x[j] - lse;
}

// y = (x - mean) * rstd per row; affine applied by the caller. Saves
// mean/rstd pairs for the backward pass.
inline void layer_norm_row(const double* x, double* y, int64_t n, double eps, double* mean_out,
                           double* rstd_out) {
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += x[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
        const double d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < n; ++j) y[j] = (x[j] - mean) * rstd;
    *mean_out = mean;
    *rstd_out = rstd;
}

}  // namespace kernels

// FNV-1a over raw bytes; used for dataset/model fingerprints in manifests.
inline uint64_t fnv1a64(const void* bytes, size_t len, uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t tensor_checksum(const Tensor& t, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(t.data(), sizeof(double) * static_cast<size_t>(t.numel()), h);
}

}  // namespace sicql
