#ifndef CUTS_OPTIM_HPP
#define CUTS_OPTIM_HPP

#include <cmath>
#include <vector>

#include "cuts/common.hpp"

namespace cuts {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    long t = 0;

    void reset(const std::vector<Matrix>& params) {
        m.clear();
        v.clear();
        for (const auto& p : params) {
            m.push_back(Matrix::Zero(p.rows(), p.cols()));
            v.push_back(Matrix::Zero(p.rows(), p.cols()));
        }
        t = 0;
    }
};

// Standard Adam with bias correction. `lr` is the already-scheduled rate.
inline void adam_step(std::vector<Matrix>& params, const std::vector<Matrix>& grads,
                      AdamState& state, const AdamConfig& cfg, double lr) {
    if (state.m.size() != params.size()) state.reset(params);
    if (grads.size() != params.size()) {
        fail(ErrorCode::ShapeMismatch, "adam_step: gradient count mismatch");
    }
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i].rows() != params[i].rows() || grads[i].cols() != params[i].cols()) {
            fail(ErrorCode::ShapeMismatch, "adam_step: gradient shape mismatch");
        }
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i].array().matrix() +
                     (1.0 - cfg.beta2) * grads[i].cwiseProduct(grads[i]);
        Matrix mhat = state.m[i] / bc1;
        Matrix vhat = state.v[i] / bc2;
        params[i].array() -= lr * mhat.array() / (vhat.array().sqrt() + cfg.eps);
    }
}

// Cosine annealing multiplier: 1 at t=0, 0 at t=total.
inline double cosine_lr_multiplier(long t, long total) {
    if (total <= 0) return 1.0;
    if (t >= total) return 0.0;
    return 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(t) / static_cast<double>(total)));
}

}  // namespace cuts

#endif  // CUTS_OPTIM_HPP
