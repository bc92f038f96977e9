#pragma once

// AdamW with decoupled weight decay (weight matrices only), global-norm
// gradient clipping, and the warmup + cosine learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <vector>

#include "latentlab/kernel.hpp"
#include "latentlab/model.hpp"

namespace latentlab {

struct OptimizerConfig {
    double peak_lr = 3e-4;
    double warmup_ratio = 0.03;
    std::int64_t total_steps = 0;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 2.0;
};

// Piecewise schedule: linear warmup from 0 to peak over warmup_ratio *
// total_steps, then cosine decay to 0 at total_steps.
inline double lr_at(std::int64_t step, const OptimizerConfig& cfg) {
    if (cfg.total_steps <= 0) throw ConfigError("lr_at: total_steps not set");
    if (step < 0 || step > cfg.total_steps) throw ConfigError("lr_at: step outside [0, total_steps]");
    const double warmup = cfg.warmup_ratio * static_cast<double>(cfg.total_steps);
    if (warmup >= 1.0 && static_cast<double>(step) < warmup)
        return cfg.peak_lr * static_cast<double>(step) / warmup;
    const double denom = static_cast<double>(cfg.total_steps) - warmup;
    if (denom <= 0.0) return 0.0;
    const double progress = (static_cast<double>(step) - warmup) / denom;
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <class T>
struct OptimizerState {
    OptimizerConfig cfg;
    std::vector<T> m;  // first moments, parameter layout
    std::vector<T> v;  // second moments
    std::int64_t step = 0;

    OptimizerState(const ModelConfig& model_cfg, const OptimizerConfig& opt_cfg) : cfg(opt_cfg) {
        const auto n = static_cast<std::size_t>(param_count(model_cfg));
        m.assign(n, T(0));
        v.assign(n, T(0));
    }
};

// Scales gradients in place to cap the global L2 norm; returns the pre-clip
// norm.
template <class T>
double clip_global_norm(GradBuffer<T>& grads, double max_norm) {
    const double norm = std::sqrt(grads.squared_norm());
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& g : grads.flat) g *= s;
    }
    return norm;
}

// One AdamW step with bias correction. Decay applies only to tensors flagged
// in the parameter layout (weight matrices; embeddings, norms, and biases
// are exempt). Increments the step counter.
template <class T>
void adamw_step(OptimizerState<T>& opt, ModelState<T>& model, const GradBuffer<T>& grads, double lr) {
    if (grads.flat.size() != model.flat.size()) throw ConfigError("adamw_step: gradient shape mismatch");
    opt.step += 1;
    const double b1 = opt.cfg.beta1, b2 = opt.cfg.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    const auto layout = param_layout(model.config);
    for (const auto& spec : layout) {
        const double wd = spec.decay ? opt.cfg.weight_decay : 0.0;
        T* p = model.flat.data() + spec.offset;
        const T* g = grads.flat.data() + spec.offset;
        T* m = opt.m.data() + spec.offset;
        T* v = opt.v.data() + spec.offset;
        for (std::int64_t i = 0; i < spec.size(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            double update = mhat / (std::sqrt(vhat) + opt.cfg.eps);
            if (wd > 0.0) update += wd * static_cast<double>(p[i]);
            p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * update);
        }
    }
}

}  // namespace latentlab
