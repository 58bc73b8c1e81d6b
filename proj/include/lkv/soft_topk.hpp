// SPDX-License-Identifier: Apache-2.0
//
// Differentiable relaxed top-k selection built from the Laplace CDF.
//
// The operator maps a score vector x and a fractional budget k in (0, n) to
// values f(x_i - lambda) in (0, 1) whose sum is exactly k, where
// f(z) = 1 - exp(-z)/2 for z >= 0 and exp(z)/2 otherwise. The threshold
// lambda has a closed form once the split index m (number of scores at or
// above lambda on the descending sort) is known: with partial sums
// S1 = sum_{i<=m} e^{-x_i} and S2 = sum_{i>m} e^{x_i},
//
//   lambda = log( (sqrt((k-m)^2 + S1*S2) - (k-m)) / S1 ).
//
// All exponential mass is tracked in log space (running log-sum-exp prefix
// and suffix tables), which keeps the solve exact for arbitrarily wide score
// spreads, e.g. the near-hard regime reached by dividing scores by a tiny
// temperature. The backward pass uses the implicit-function-theorem
// derivatives of the constraint, never differentiating the closed form:
//
//   d lambda / d x_j = f'(x_j - lambda) / sum_i f'(x_i - lambda)
//   d lambda / d k   = -1 / sum_i f'(x_i - lambda)
//
// with f'(z) = exp(-|z|)/2 strictly positive, so the quotients always exist.

#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lkv/tensor.hpp"

namespace lkv {

struct SoftTopKOutput {
    std::vector<double> values;         // in (0,1)^n, sums to the clamped budget
    double threshold_lambda = 0.0;      // threshold on the temperature-scaled scores
    int split_m = 0;                    // scores at or above lambda (descending sort)
    std::vector<double> density_terms;  // f'(x_i/tau - lambda), strictly positive
    std::vector<int> permutation;       // descending sort order used by the solve
    double clamped_k = 0.0;
    double tau = 1.0;
};

struct GumbelNoise {
    std::vector<double> values;
    uint64_t seed = 0;
};

// Laplace CDF, 1 - exp(-z)/2 for z >= 0 and exp(z)/2 for z < 0.
double laplace_cdf(double z);

// Threshold so that sum_i f(x_i - lambda) == k, plus the split index.
// k is clamped into [eps, n - eps], eps = min(1e-3, 0.01 n); values outside
// (0, n) raise budget_error. Requires n >= 2.
std::pair<double, int> solve_threshold(std::span<const double> x, double k);

// Relaxed selection values f(x_i/tau - lambda(x/tau)). tau must be positive.
SoftTopKOutput soft_topk_forward(std::span<const double> x, double k, double tau);

// Vector-Jacobian product against the scores and the budget:
//   grad_x_j = f'_j (u_j - <u, f'> / sum f') / tau
//   grad_k   = <u, f'> / sum f'
std::pair<std::vector<double>, double> soft_topk_vjp(const SoftTopKOutput& saved,
                                                     std::span<const double> upstream,
                                                     double tau);

// Binary mask with exactly b ones at the largest scores; ties keep the lowest
// index.
std::vector<int> hard_topk(std::span<const double> x, int b);

// n i.i.d. samples of -log(-log U), U uniform and clamped away from {0, 1}.
GumbelNoise sample_gumbel(int n, uint64_t seed);

// Autodiff bridge. x is rank-1, k is a scalar tensor; gradients flow to both.
Tensor soft_topk(const Tensor& x, const Tensor& k, double tau);

}  // namespace lkv
