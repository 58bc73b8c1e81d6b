// SPDX-License-Identifier: Apache-2.0
//
// Test-only reference implementations. These stay independent of the library
// code paths they check: the threshold oracle brackets the constraint root by
// bisection, and the attention oracle works in log space, the formulation the
// production kernel deliberately avoids.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "lkv/attention.hpp"

namespace lkv::test {

inline double laplace_cdf_ref(double z) {
    return z >= 0.0 ? 1.0 - 0.5 * std::exp(-z) : 0.5 * std::exp(z);
}

// Root of sum_i f(x_i - lambda) = k by bisection on [min x - 40, max x + 40].
inline double bisect_lambda(std::span<const double> x, double k, double tol = 1e-12) {
    double lo = *std::min_element(x.begin(), x.end()) - 40.0;
    double hi = *std::max_element(x.begin(), x.end()) + 40.0;
    auto g = [&](double lam) {
        double s = 0.0;
        for (double v : x) s += laplace_cdf_ref(v - lam);
        return s - k;
    };
    // g decreases in lambda.
    for (int it = 0; it < 200 && hi - lo > tol; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (g(mid) > 0.0) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

// Log-space masked attention softmax(s + log m) V, admissibility and the
// self-retained override handled identically to the production call.
inline std::vector<double> logspace_masked_attention(const lkv::AttentionCall& call) {
    const int n_q = call.n_q, t = call.t, d = call.d;
    std::vector<double> out(static_cast<size_t>(n_q) * d, 0.0);
    std::vector<double> a(static_cast<size_t>(t));
    for (int r = 0; r < n_q; ++r) {
        const int pos = call.query_pos_offset + r;
        const int end = call.causal ? std::min(t, pos + 1) : t;
        const double* q = call.queries.data() + static_cast<size_t>(r) * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < end; ++j) {
            const double* kk = call.keys.data() + static_cast<size_t>(j) * d;
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += q[c] * kk[c];
            double m = call.soft_mask.empty() ? 1.0 : call.soft_mask[static_cast<size_t>(j)];
            if (call.self_always_retained && j == pos) m = 1.0;
            a[static_cast<size_t>(j)] = call.scale * dot + std::log(m);
            mx = std::max(mx, a[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < end; ++j) {
            a[static_cast<size_t>(j)] = std::exp(a[static_cast<size_t>(j)] - mx);
            z += a[static_cast<size_t>(j)];
        }
        double* o = out.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < end; ++j) {
            const double w = a[static_cast<size_t>(j)] / z;
            const double* v = call.values.data() + static_cast<size_t>(j) * d;
            for (int c = 0; c < d; ++c) o[c] += w * v[c];
        }
    }
    return out;
}

// d/dm of the log-space formulation, computed analytically per row as the
// chain softmax-jacobian * (1/m). Valid for masks bounded away from zero;
// near zero it exhibits exactly the 1/m blow-up the production kernel avoids.
inline std::vector<double> logspace_mask_gradient(const lkv::AttentionCall& call,
                                                  const std::vector<double>& upstream) {
    const int n_q = call.n_q, t = call.t, d = call.d;
    std::vector<double> grad(static_cast<size_t>(t), 0.0);
    std::vector<double> a(static_cast<size_t>(t)), p(static_cast<size_t>(t)), w(static_cast<size_t>(t));
    for (int r = 0; r < n_q; ++r) {
        const int pos = call.query_pos_offset + r;
        const int end = call.causal ? std::min(t, pos + 1) : t;
        const double* q = call.queries.data() + static_cast<size_t>(r) * d;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < end; ++j) {
            const double* kk = call.keys.data() + static_cast<size_t>(j) * d;
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += q[c] * kk[c];
            double m = call.soft_mask.empty() ? 1.0 : call.soft_mask[static_cast<size_t>(j)];
            if (call.self_always_retained && j == pos) m = 1.0;
            a[static_cast<size_t>(j)] = call.scale * dot + std::log(m);
            mx = std::max(mx, a[static_cast<size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j < end; ++j) {
            p[static_cast<size_t>(j)] = std::exp(a[static_cast<size_t>(j)] - mx);
            z += p[static_cast<size_t>(j)];
        }
        double wp = 0.0;
        const double* u = upstream.data() + static_cast<size_t>(r) * d;
        for (int j = 0; j < end; ++j) {
            p[static_cast<size_t>(j)] /= z;
            const double* v = call.values.data() + static_cast<size_t>(j) * d;
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += u[c] * v[c];
            w[static_cast<size_t>(j)] = dot;
            wp += dot * p[static_cast<size_t>(j)];
        }
        for (int j = 0; j < end; ++j) {
            if (call.self_always_retained && j == pos) continue;
            const double m = call.soft_mask.empty() ? 1.0 : call.soft_mask[static_cast<size_t>(j)];
            const double d_logit = p[static_cast<size_t>(j)] * (w[static_cast<size_t>(j)] - wp);
            grad[static_cast<size_t>(j)] += d_logit / m;
        }
    }
    return grad;
}

}  // namespace lkv::test
