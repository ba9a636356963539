#pragma once

#include <cmath>

#include "gemq/tensor.hpp"

namespace gemq {

struct AdamWConfig {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamWState {
    Tensor m;
    Tensor v;
    long step = 0;
};

// Decoupled weight decay update with bias-corrected moments:
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p
inline void adamw_step(Tensor& param, const Tensor& grad, AdamWState& state,
                       const AdamWConfig& cfg) {
    if (!param.same_shape(grad)) fail("shape", "adamw_step grad shape mismatch");
    if (state.step == 0) {
        state.m = Tensor(param.rows, param.cols);
        state.v = Tensor(param.rows, param.cols);
    }
    state.step += 1;
    double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        double g = grad.data[i];
        double m = state.m.data[i] = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
        double v = state.v.data[i] = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
        double mh = m / bc1;
        double vh = v / bc2;
        param.data[i] -= cfg.learning_rate * (mh / (std::sqrt(vh) + cfg.eps))
                       + cfg.learning_rate * cfg.weight_decay * param.data[i];
    }
}

} // namespace gemq
