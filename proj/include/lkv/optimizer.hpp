// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "lkv/tensor.hpp"

namespace lkv {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;  // decoupled
};

// Adaptive-moment optimizer with decoupled weight decay. Parameters are
// updated in place through their shared buffers.
class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {});

    // Applies one update; grads are scaled by grad_scale before use (the
    // caller folds gradient clipping into this factor).
    void step(const GradMap& grads, double lr, double grad_scale = 1.0);

    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamConfig cfg_;
    int64_t t_ = 0;
};

// Euclidean norm of the concatenated gradients of `params`.
double global_grad_norm(const std::vector<Tensor>& params, const GradMap& grads);

}  // namespace lkv
