// SPDX-License-Identifier: Apache-2.0

#include "lkv/optimizer.hpp"

#include <cmath>

#include "lkv/errors.hpp"

namespace lkv {

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step(const GradMap& grads, double lr, double grad_scale) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        if (!grads.contains(p)) continue;
        const Tensor g = grads.grad_for(p);
        double* pd = p.data();
        const double* gd = g.data();
        auto& m = m_[pi];
        auto& v = v_[pi];
        const size_t n = p.numel();
        for (size_t i = 0; i < n; ++i) {
            const double gi = gd[i] * grad_scale;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            pd[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * pd[i]);
        }
    }
}

double global_grad_norm(const std::vector<Tensor>& params, const GradMap& grads) {
    double sq = 0.0;
    for (const Tensor& p : params) {
        if (!grads.contains(p)) continue;
        const Tensor g = grads.grad_for(p);
        const double* gd = g.data();
        for (size_t i = 0; i < g.numel(); ++i) sq += gd[i] * gd[i];
    }
    return std::sqrt(sq);
}

}  // namespace lkv
