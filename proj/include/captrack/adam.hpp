#pragma once

#include <cmath>

#include "captrack/tensor.hpp"

namespace captrack {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment estimates for one parameter tensor.
struct AdamState {
    Tensor m, v;

    AdamState() = default;
    explicit AdamState(const std::vector<int>& shape) : m(shape), v(shape) {}
};

/// One Adam update with bias correction. `step` is 1-based.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& state, int64_t step,
                      const AdamConfig& cfg) {
    require(param.same_shape(grad) && param.same_shape(state.m),
            "adam_step: shape mismatch");
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (size_t i = 0; i < param.data.size(); ++i) {
        double g = grad.data[i];
        state.m.data[i] = cfg.beta1 * state.m.data[i] + (1.0 - cfg.beta1) * g;
        state.v.data[i] = cfg.beta2 * state.v.data[i] + (1.0 - cfg.beta2) * g * g;
        double mhat = state.m.data[i] / c1;
        double vhat = state.v.data[i] / c2;
        param.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

}  // namespace captrack
