#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "ogpo/tensor.hpp"

namespace ogpo {

enum class Scheduler { Constant, CosineWithWarmup };

inline const char* to_string(Scheduler s) {
    return s == Scheduler::Constant ? "constant" : "cosine";
}

inline Scheduler scheduler_from_string(const std::string& s) {
    if (s == "constant") return Scheduler::Constant;
    if (s == "cosine") return Scheduler::CosineWithWarmup;
    throw std::invalid_argument("unknown scheduler: " + s);
}

// Adam with decoupled weight decay. One state per parameter list; the list
// order must stay fixed across calls.
struct OptimState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;
    Scheduler scheduler = Scheduler::Constant;
    long warmup_steps = 0;
    long decay_steps = 0;
    double end_value = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    static OptimState for_params(const std::vector<Tensor>& params) {
        OptimState s;
        for (const auto& p : params) {
            s.m.emplace_back(p.shape());
            s.v.emplace_back(p.shape());
        }
        return s;
    }
};

// Linear warmup 0 -> base over warmup_steps, then cosine decay to end_value
// over decay_steps, flat afterwards. Constant scheduler ignores all of that.
inline double lr_at(long step, const OptimState& state, double base_lr) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (state.scheduler == Scheduler::Constant) return base_lr;
    if (state.warmup_steps > 0 && step < state.warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(state.warmup_steps);
    }
    if (state.decay_steps <= 0) return base_lr;
    const long t = step - state.warmup_steps;
    if (t >= state.decay_steps) return state.end_value;
    const double frac = static_cast<double>(t) / static_cast<double>(state.decay_steps);
    const double cosv = 0.5 * (1.0 + std::cos(M_PI * frac));
    return state.end_value + (base_lr - state.end_value) * cosv;
}

inline void adam_update(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                        OptimState& state, double lr) {
    if (lr <= 0.0) throw std::invalid_argument("adam_update: lr must be positive");
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw std::invalid_argument("adam_update: size mismatch");
    }
    state.step += 1;
    const double b1 = state.beta1, b2 = state.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = grads[i];
        if (!p.same_shape(g) || !p.same_shape(state.m[i])) {
            throw std::invalid_argument("adam_update: shape mismatch at param " +
                                        std::to_string(i));
        }
        double* pd = p.data();
        const double* gd = g.data();
        double* md = state.m[i].data();
        double* vd = state.v[i].data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
            vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
            const double mhat = md[j] / bc1;
            const double vhat = vd[j] / bc2;
            pd[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
            if (state.weight_decay != 0.0) pd[j] -= lr * state.weight_decay * pd[j];
        }
    }
}

// Scheduled convenience: looks up the rate for the state's current step count.
inline double adam_update_scheduled(std::vector<Tensor*> params, const std::vector<Tensor>& grads,
                                    OptimState& state, double base_lr) {
    const double lr = lr_at(state.step, state, base_lr);
    if (lr > 0.0) {
        adam_update(std::move(params), grads, state, lr);
    } else {
        state.step += 1;  // warmup step 0: rate is zero, params unchanged
    }
    return lr;
}

inline void ema_update(std::vector<Tensor>& dst, const std::vector<Tensor>& src, double rate) {
    if (dst.size() != src.size()) throw std::invalid_argument("ema_update: size mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (!dst[i].same_shape(src[i])) throw std::invalid_argument("ema_update: shape mismatch");
        double* d = dst[i].data();
        const double* s = src[i].data();
        for (std::size_t j = 0; j < dst[i].size(); ++j) {
            d[j] = (1.0 - rate) * d[j] + rate * s[j];
        }
    }
}

}  // namespace ogpo
