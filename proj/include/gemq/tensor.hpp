#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "gemq/common.hpp"

namespace gemq {

// Dense row-major matrix of 64-bit floats. Vectors are 1xN or Nx1.
struct Tensor {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Tensor(std::size_t r, std::size_t c, std::vector<double> d)
        : rows(r), cols(c), data(std::move(d)) {
        if (data.size() != rows * cols) fail("shape", "data length does not match rows*cols");
    }

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    std::size_t size() const { return data.size(); }

    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void check_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) fail("numeric", std::string(what) + " contains non-finite values");
}

// c = a * b. Accumulation is left-to-right over k per output element, so
// results are bitwise deterministic across runs.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols != b.rows) fail("shape", "matmul inner dimensions do not match");
    Tensor c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = &a.data[i * a.cols];
        double* ci = &c.data[i * b.cols];
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = ai[k];
            const double* bk = &b.data[k * b.cols];
            for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
        }
    }
    return c;
}

// c = a * b^T  (a: m x k, b: n x k -> m x n)
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols != b.cols) fail("shape", "matmul_nt inner dimensions do not match");
    Tensor c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* ai = &a.data[i * a.cols];
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* bj = &b.data[j * b.cols];
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) acc += ai[k] * bj[k];
            c(i, j) = acc;
        }
    }
    return c;
}

// c = a^T * b  (a: k x m, b: k x n -> m x n)
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    if (a.rows != b.rows) fail("shape", "matmul_tn inner dimensions do not match");
    Tensor c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* ak = &a.data[k * a.cols];
        const double* bk = &b.data[k * b.cols];
        for (std::size_t i = 0; i < a.cols; ++i) {
            double* ci = &c.data[i * b.cols];
            const double aki = ak[i];
            for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aki * bk[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    Tensor t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) fail("shape", "add shapes do not match");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] += b.data[i];
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) fail("shape", "sub shapes do not match");
    Tensor c = a;
    for (std::size_t i = 0; i < c.size(); ++i) c.data[i] -= b.data[i];
    return c;
}

inline Tensor scale(const Tensor& a, double s) {
    Tensor c = a;
    for (double& v : c.data) v *= s;
    return c;
}

// Row-wise softmax, stabilized by per-row max subtraction.
inline Tensor softmax_rows(const Tensor& a) {
    check_finite(a, "softmax input");
    Tensor s(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double m = a(i, 0);
        for (std::size_t j = 1; j < a.cols; ++j) m = std::max(m, a(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            double e = std::exp(a(i, j) - m);
            s(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < a.cols; ++j) s(i, j) /= sum;
    }
    return s;
}

// Mean over rows of -log softmax(logits)[target].
inline double cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rows != targets.size())
        fail("shape", "cross_entropy needs one logits row per target");
    double total = 0.0;
    for (std::size_t i = 0; i < logits.rows; ++i) {
        int t = targets[i];
        if (t < 0 || std::size_t(t) >= logits.cols)
            fail("range", "target id out of vocab range");
        double m = logits(i, 0);
        for (std::size_t j = 1; j < logits.cols; ++j) m = std::max(m, logits(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < logits.cols; ++j) sum += std::exp(logits(i, j) - m);
        total += -(logits(i, std::size_t(t)) - m - std::log(sum));
    }
    return total / double(logits.rows);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// SiLU (x * sigmoid(x)): smooth activation with an everywhere-defined
// derivative, recorded as the checkpoint's activation constant.
inline Tensor silu(const Tensor& a) {
    Tensor c = a;
    for (double& v : c.data) v = v * sigmoid(v);
    return c;
}

inline double silu_grad(double x) {
    double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

// y[t] = mean of rows 0..t of x (fixed causal context mixer).
inline Tensor causal_mean(const Tensor& x) {
    Tensor y(x.rows, x.cols);
    std::vector<double> acc(x.cols, 0.0);
    for (std::size_t t = 0; t < x.rows; ++t) {
        for (std::size_t j = 0; j < x.cols; ++j) {
            acc[j] += x(t, j);
            y(t, j) = acc[j] / double(t + 1);
        }
    }
    return y;
}

inline double frobenius_sq(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return s;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
    return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

} // namespace gemq
