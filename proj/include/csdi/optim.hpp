#pragma once

// Bias-corrected Adam over the bundle's canonical parameter registry.
// Non-finite gradients skip the whole group step (counted, logged) rather
// than contaminating the moments.

#include <cmath>
#include <string>
#include <vector>

#include "csdi/common.hpp"
#include "csdi/tensor.hpp"

namespace csdi {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps_opt = 1e-8;

    void validate() const {
        if (lr <= 0.0) throw ConfigError("adam: lr must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ConfigError("adam: betas must lie in [0, 1)");
        if (eps_opt <= 0.0) throw ConfigError("adam: eps_opt must be positive");
    }
};

struct AdamSlot {
    Tensor m, v;
};

struct AdamState {
    std::vector<AdamSlot> slots;  // aligned with a parameter list
    std::uint64_t step = 0;
    std::uint64_t skipped = 0;

    static AdamState like(const std::vector<Tensor*>& params) {
        AdamState st;
        st.slots.reserve(params.size());
        for (const Tensor* p : params)
            st.slots.push_back({Tensor::zeros(p->rows(), p->cols()), Tensor::zeros(p->rows(), p->cols())});
        return st;
    }
};

// One update over a parameter group. Gradients may be empty tensors
// (parameter unused this step); those entries are treated as zero gradient.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                      AdamState& state, const AdamConfig& cfg) {
    cfg.validate();
    if (params.size() != grads.size() || params.size() != state.slots.size())
        throw ShapeError("adam_step: group size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i] || grads[i]->numel() == 0) continue;
        if (!grads[i]->same_shape(*params[i]))
            throw ShapeError("adam_step: gradient " + grads[i]->shape_str() + " for parameter " +
                             params[i]->shape_str() + " at slot " + std::to_string(i));
        if (!grads[i]->all_finite()) {
            state.skipped += 1;
            log_line(LogLevel::error, "adam_step: non-finite gradient, skipping step " +
                                          std::to_string(state.step + 1));
            return;
        }
    }
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& x = *params[i];
        AdamSlot& slot = state.slots[i];
        const bool has = grads[i] && grads[i]->numel() > 0;
        for (std::size_t j = 0; j < x.v.size(); ++j) {
            const double g = has ? grads[i]->v[j] : 0.0;
            slot.m.v[j] = cfg.beta1 * slot.m.v[j] + (1.0 - cfg.beta1) * g;
            slot.v.v[j] = cfg.beta2 * slot.v.v[j] + (1.0 - cfg.beta2) * g * g;
            x.v[j] -= cfg.lr * (slot.m.v[j] / bc1) / (std::sqrt(slot.v.v[j] / bc2) + cfg.eps_opt);
        }
    }
}

}  // namespace csdi
