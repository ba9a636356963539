#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "gemq/tensor.hpp"

namespace gemq {

struct QuantConfig {
    int bits = 3;                 // in {1,2,3,4}
    std::size_t group_size = 128; // contiguous input-dim columns per scale/zero
    double damp_ratio = 0.01;     // fraction of mean Hessian diagonal

    void validate() const {
        if (bits < 1 || bits > 4) fail("config", "bits must be in {1,2,3,4}");
        if (group_size < 1) fail("config", "group_size must be >= 1");
    }
    QuantConfig with_bits(int b) const {
        QuantConfig c = *this;
        c.bits = b;
        return c;
    }
};

struct QuantizedMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    int bits = 0;
    std::size_t group_size = 0;
    std::vector<std::uint8_t> q;     // rows*cols codes, row-major
    std::vector<double> scales;      // rows * n_groups
    std::vector<std::uint8_t> zeros; // rows * n_groups

    std::size_t n_groups() const { return (cols + group_size - 1) / group_size; }
    double scale_at(std::size_t r, std::size_t g) const { return scales[r * n_groups() + g]; }
    int zero_at(std::size_t r, std::size_t g) const { return zeros[r * n_groups() + g]; }

    Tensor dequant() const {
        Tensor t(rows, cols);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                std::size_t g = c / group_size;
                t(r, c) = scale_at(r, g) * (double(q[r * cols + c]) - double(zero_at(r, g)));
            }
        return t;
    }

    bool operator==(const QuantizedMatrix&) const = default;
};

namespace detail {

// Per-group affine parameters from the source values:
//   scale = (max - min) / (2^b - 1)   (1 if max == min)
//   zero  = clamp(round(-min/scale), 0, 2^b - 1)
inline void group_params(const Tensor& w, const QuantConfig& cfg, QuantizedMatrix& out) {
    const int qmax = (1 << cfg.bits) - 1;
    std::size_t ng = out.n_groups();
    out.scales.assign(w.rows * ng, 1.0);
    out.zeros.assign(w.rows * ng, 0);
    for (std::size_t r = 0; r < w.rows; ++r) {
        for (std::size_t g = 0; g < ng; ++g) {
            std::size_t c0 = g * cfg.group_size;
            std::size_t c1 = std::min(w.cols, c0 + cfg.group_size);
            double lo = w(r, c0), hi = w(r, c0);
            for (std::size_t c = c0 + 1; c < c1; ++c) {
                lo = std::min(lo, w(r, c));
                hi = std::max(hi, w(r, c));
            }
            double scale = (hi == lo) ? 1.0 : (hi - lo) / double(qmax);
            double z = round_half_away(-lo / scale);
            int zero = int(std::clamp(z, 0.0, double(qmax)));
            out.scales[r * ng + g] = scale;
            out.zeros[r * ng + g] = std::uint8_t(zero);
        }
    }
}

inline std::uint8_t encode_one(double v, double scale, int zero, int qmax) {
    double q = round_half_away(v / scale) + double(zero);
    return std::uint8_t(std::clamp(q, 0.0, double(qmax)));
}

// Cholesky factor L (lower) of a symmetric positive-definite matrix.
// Returns false if the matrix is not positive definite.
inline bool cholesky_lower(const Tensor& a, Tensor& l) {
    std::size_t n = a.rows;
    l = Tensor(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            if (i == j) {
                if (s <= 0.0 || !std::isfinite(s)) return false;
                l(i, i) = std::sqrt(s);
            } else {
                l(i, j) = s / l(j, j);
            }
        }
    }
    return true;
}

// Inverse of an SPD matrix via its Cholesky factor.
inline Tensor spd_inverse(const Tensor& a, const char* err_context) {
    Tensor l;
    if (!cholesky_lower(a, l))
        fail("conditioning", std::string(err_context) + ": Hessian not positive definite");
    std::size_t n = a.rows;
    Tensor inv(n, n);
    // Solve A x = e_j per column via forward/back substitution.
    std::vector<double> y(n), x(n);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = (i == j) ? 1.0 : 0.0;
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
            y[i] = s / l(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = y[i];
            for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
            x[i] = s / l(i, i);
        }
        for (std::size_t i = 0; i < n; ++i) inv(i, j) = x[i];
    }
    return inv;
}

} // namespace detail

// Round-to-nearest group-wise asymmetric quantization.
inline QuantizedMatrix affine_quantize(const Tensor& w, const QuantConfig& cfg) {
    cfg.validate();
    check_finite(w, "affine_quantize input");
    QuantizedMatrix out;
    out.rows = w.rows;
    out.cols = w.cols;
    out.bits = cfg.bits;
    out.group_size = cfg.group_size;
    detail::group_params(w, cfg, out);
    const int qmax = (1 << cfg.bits) - 1;
    out.q.resize(w.rows * w.cols);
    std::size_t ng = out.n_groups();
    for (std::size_t r = 0; r < w.rows; ++r)
        for (std::size_t c = 0; c < w.cols; ++c) {
            std::size_t g = c / cfg.group_size;
            out.q[r * w.cols + c] = detail::encode_one(
                w(r, c), out.scales[r * ng + g], out.zeros[r * ng + g], qmax);
        }
    return out;
}

// GPTQ: column-by-column quantization with second-order error compensation.
// H = 2 X X^T + damp; columns in natural order; the remaining columns absorb
// each column's rounding error through the Cholesky factor of H^-1.
// calib_inputs holds one calibration sample per column (rows == w.cols).
inline QuantizedMatrix gptq_quantize(const Tensor& w, const Tensor& calib_inputs,
                                     const QuantConfig& cfg) {
    cfg.validate();
    check_finite(w, "gptq input");
    if (calib_inputs.rows != w.cols)
        fail("shape", "calibration input dimension does not match weight input dimension");
    if (calib_inputs.cols < 1) fail("input", "need at least one calibration sample");

    const std::size_t n = w.cols;
    Tensor h = scale(matmul_nt(calib_inputs, calib_inputs), 2.0); // 2 X X^T
    double mean_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean_diag += h(i, i);
    mean_diag /= double(n);
    double damp = cfg.damp_ratio * mean_diag;
    for (std::size_t i = 0; i < n; ++i) h(i, i) += damp;

    Tensor hinv = detail::spd_inverse(h, "gptq");
    Tensor m;
    if (!detail::cholesky_lower(hinv, m))
        fail("conditioning", "gptq: inverse Hessian not positive definite");
    // Upper factor U = M^T with Hinv = U^T U.
    Tensor u = transpose(m);

    QuantizedMatrix out;
    out.rows = w.rows;
    out.cols = w.cols;
    out.bits = cfg.bits;
    out.group_size = cfg.group_size;
    detail::group_params(w, cfg, out);
    const int qmax = (1 << cfg.bits) - 1;
    out.q.resize(w.rows * w.cols);
    std::size_t ng = out.n_groups();

    Tensor work = w;
    for (std::size_t c = 0; c < n; ++c) {
        double d = u(c, c);
        std::size_t g = c / cfg.group_size;
        for (std::size_t r = 0; r < w.rows; ++r) {
            double scale = out.scales[r * ng + g];
            int zero = out.zeros[r * ng + g];
            std::uint8_t q = detail::encode_one(work(r, c), scale, zero, qmax);
            out.q[r * w.cols + c] = q;
            double dq = scale * (double(q) - double(zero));
            double err = (work(r, c) - dq) / d;
            for (std::size_t j = c + 1; j < n; ++j) work(r, j) -= err * u(c, j);
        }
    }
    return out;
}

} // namespace gemq
