// SPDX-License-Identifier: Apache-2.0

#include "lkv/soft_topk.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>
#include <numeric>

#include "lkv/errors.hpp"
#include "lkv/rng.hpp"

namespace lkv {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logaddexp(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log1p(std::exp(-std::fabs(a - b)));
}

double clamp_budget(double k, int n) {
    if (!(k > 0.0) || !(k < static_cast<double>(n))) {
        throw budget_error("k must lie strictly inside (0, n)");
    }
    const double eps = std::min(1e-3, 0.01 * n);
    return std::min(std::max(k, eps), n - eps);
}

// Candidate threshold for a given split m, evaluated in log space. l1/l2 are
// log(S1) and log(S2) over the descending-sorted scores; either may be -inf
// at the two degenerate splits.
double candidate_lambda(int m, int n, double k, double l1, double l2) {
    if (m == 0) return l2 - std::log(2.0 * k);
    if (m == n) return std::log(2.0 * (n - k)) - l1;
    const double a = k - m;
    const double d = l1 + l2;
    if (a == 0.0) return 0.5 * (l2 - l1);
    const double root = std::sqrt(a * a + std::exp(d));
    if (a < 0.0) return std::log(root - a) - l1;
    // Cancellation-free form of log(root - a) for a > 0.
    return d - std::log(root + a) - l1;
}

}  // namespace

double laplace_cdf(double z) {
    if (!std::isfinite(z)) throw numeric_error("laplace_cdf: non-finite input");
    if (z >= 0.0) return 1.0 - 0.5 * std::exp(-z);
    return 0.5 * std::exp(z);
}

std::pair<double, int> solve_threshold(std::span<const double> x, double k) {
    const int n = static_cast<int>(x.size());
    if (n < 2) throw contract_error("solve_threshold: need at least two scores");
    for (double v : x) {
        if (!std::isfinite(v)) throw numeric_error("solve_threshold: non-finite score");
        if (std::fabs(v) > 1e300) throw overflow_guard_error("solve_threshold: score magnitude beyond float64 exponent range");
    }
    const double kc = clamp_budget(k, n);

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&x](int a, int b) { return x[static_cast<size_t>(a)] > x[static_cast<size_t>(b)]; });
    std::vector<double> xs(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) xs[static_cast<size_t>(i)] = x[static_cast<size_t>(order[static_cast<size_t>(i)])];

    // log prefix sums of e^{-x} and log suffix sums of e^{x}.
    std::vector<double> l1(static_cast<size_t>(n) + 1, kNegInf);
    std::vector<double> l2(static_cast<size_t>(n) + 1, kNegInf);
    for (int m = 1; m <= n; ++m) {
        l1[static_cast<size_t>(m)] = logaddexp(l1[static_cast<size_t>(m - 1)], -xs[static_cast<size_t>(m - 1)]);
    }
    for (int m = n - 1; m >= 0; --m) {
        l2[static_cast<size_t>(m)] = logaddexp(l2[static_cast<size_t>(m + 1)], xs[static_cast<size_t>(m)]);
    }

    constexpr double kSlack = 1e-12;
    double best_lambda = 0.0;
    double best_violation = std::numeric_limits<double>::infinity();
    int best_m = -1;
    for (int m = 0; m <= n; ++m) {
        const double lam = candidate_lambda(m, n, kc, l1[static_cast<size_t>(m)], l2[static_cast<size_t>(m)]);
        if (!std::isfinite(lam)) continue;
        const double hi_violation = (m == 0) ? 0.0 : std::max(0.0, lam - xs[static_cast<size_t>(m - 1)]);
        const double lo_violation = (m == n) ? 0.0 : std::max(0.0, xs[static_cast<size_t>(m)] - lam);
        const double violation = std::max(hi_violation, lo_violation);
        if (violation <= kSlack) return {lam, m};
        if (violation < best_violation) {
            best_violation = violation;
            best_lambda = lam;
            best_m = m;
        }
    }
    // Rounding can push the root marginally outside every bracket; accept the
    // nearest candidate if it still satisfies the constraint.
    if (best_m >= 0 && best_violation < 1e-6) {
        double sum = 0.0;
        for (double v : xs) sum += laplace_cdf(v - best_lambda);
        if (std::fabs(sum - kc) <= 1e-9 * n) return {best_lambda, best_m};
    }
    throw numeric_error("solve_threshold: no bracket admitted the closed-form root");
}

SoftTopKOutput soft_topk_forward(std::span<const double> x, double k, double tau) {
    if (!(tau > 0.0)) throw contract_error("soft_topk_forward: tau must be positive");
    const int n = static_cast<int>(x.size());
    if (n < 1) throw contract_error("soft_topk_forward: empty scores");

    SoftTopKOutput out;
    out.tau = tau;

    if (n == 1) {
        // The constraint pins the single output to the clamped budget.
        if (!std::isfinite(x[0])) throw numeric_error("soft_topk_forward: non-finite score");
        const double kk = clamp_budget(k, 1);
        out.clamped_k = kk;
        out.values = {kk};
        const double z = kk >= 0.5 ? -std::log(2.0 * (1.0 - kk)) : std::log(2.0 * kk);
        out.threshold_lambda = x[0] / tau - z;
        out.split_m = kk >= 0.5 ? 1 : 0;
        out.density_terms = {std::max(0.5 * std::exp(-std::fabs(z)), DBL_MIN)};
        out.permutation = {0};
        return out;
    }

    std::vector<double> scaled(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) scaled[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] / tau;

    auto [lambda, m] = solve_threshold(scaled, k);
    out.clamped_k = clamp_budget(k, n);
    out.threshold_lambda = lambda;
    out.split_m = m;

    out.values.resize(static_cast<size_t>(n));
    out.density_terms.resize(static_cast<size_t>(n));
    // Keep outputs inside the open interval as far as float64 can represent;
    // deep saturation would otherwise round to exactly 0 or 1.
    const double hi = 1.0 - DBL_EPSILON / 2;
    for (int i = 0; i < n; ++i) {
        const double z = scaled[static_cast<size_t>(i)] - lambda;
        out.values[static_cast<size_t>(i)] = std::clamp(laplace_cdf(z), DBL_MIN, hi);
        out.density_terms[static_cast<size_t>(i)] = std::max(0.5 * std::exp(-std::fabs(z)), DBL_MIN);
    }

    out.permutation.resize(static_cast<size_t>(n));
    std::iota(out.permutation.begin(), out.permutation.end(), 0);
    std::stable_sort(out.permutation.begin(), out.permutation.end(), [&x](int a, int b) {
        return x[static_cast<size_t>(a)] > x[static_cast<size_t>(b)];
    });

    double sum = 0.0;
    for (double v : out.values) sum += v;
    if (std::fabs(sum - out.clamped_k) > 1e-9 * n) {
        throw numeric_error("soft_topk_forward: budget constraint violated");
    }
    return out;
}

std::pair<std::vector<double>, double> soft_topk_vjp(const SoftTopKOutput& saved,
                                                     std::span<const double> upstream,
                                                     double tau) {
    const size_t n = saved.values.size();
    if (upstream.size() != n) throw contract_error("soft_topk_vjp: upstream length mismatch");
    if (!(tau > 0.0)) throw contract_error("soft_topk_vjp: tau must be positive");
    if (n == 1) return {{0.0}, 1.0};

    // Same summation order for both reductions, so a constant upstream yields
    // an exactly zero score gradient and an exactly unit budget gradient.
    double sum_fp = 0.0;
    double dot = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sum_fp += saved.density_terms[i];
        dot += upstream[i] * saved.density_terms[i];
    }
    const double mean_up = dot / sum_fp;

    std::vector<double> grad_x(n);
    for (size_t i = 0; i < n; ++i) {
        grad_x[i] = saved.density_terms[i] * (upstream[i] - mean_up) / tau;
    }
    return {std::move(grad_x), mean_up};
}

std::vector<int> hard_topk(std::span<const double> x, int b) {
    const int n = static_cast<int>(x.size());
    if (b < 0 || b > n) throw budget_error("hard_topk: b outside [0, n]");
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&x](int a, int c) { return x[static_cast<size_t>(a)] > x[static_cast<size_t>(c)]; });
    std::vector<int> mask(static_cast<size_t>(n), 0);
    for (int i = 0; i < b; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    return mask;
}

GumbelNoise sample_gumbel(int n, uint64_t seed) {
    if (n < 1) throw contract_error("sample_gumbel: n must be positive");
    GumbelNoise g;
    g.seed = seed;
    g.values.resize(static_cast<size_t>(n));
    Rng rng(seed);
    for (int i = 0; i < n; ++i) {
        double u = rng.uniform();
        u = std::min(std::max(u, 1e-12), 1.0 - 1e-12);
        g.values[static_cast<size_t>(i)] = -std::log(-std::log(u));
    }
    return g;
}

Tensor soft_topk(const Tensor& x, const Tensor& k, double tau) {
    if (x.rank() != 1) throw contract_error("soft_topk: scores must be rank-1");
    const double kv = k.value();
    auto saved = soft_topk_forward(std::span<const double>(x.data(), x.numel()), kv, tau);
    std::vector<double> values = saved.values;
    const int n = static_cast<int>(x.numel());
    return make_op_output(
        {n}, std::move(values), {x, k},
        [saved = std::move(saved), tau, n](const Tensor& u) {
            auto [gx, gk] = soft_topk_vjp(saved, std::span<const double>(u.data(), u.numel()), tau);
            return std::vector<Tensor>{Tensor::from({n}, std::move(gx)), Tensor::scalar(gk)};
        });
}

}  // namespace lkv
