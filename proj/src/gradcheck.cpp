// SPDX-License-Identifier: Apache-2.0

#include "lkv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <span>

#include "lkv/attention.hpp"
#include "lkv/policy.hpp"
#include "lkv/rng.hpp"
#include "lkv/soft_topk.hpp"
#include "lkv/tensor.hpp"

namespace lkv {

namespace {

double rel_gap(const double* analytic, const double* numeric, size_t n) {
    double worst = 0.0, ref = 0.0;
    for (size_t i = 0; i < n; ++i) {
        worst = std::max(worst, std::fabs(analytic[i] - numeric[i]));
        ref = std::max(ref, std::fabs(numeric[i]));
    }
    return worst / (ref + 1e-12);
}

}  // namespace

GradCheckReport gradcheck_soft_topk(uint64_t seed, int n_cases) {
    GradCheckReport report;
    report.scope = "soft_topk";
    report.cases = n_cases;
    Rng meta(seed);
    for (int rep = 0; rep < n_cases; ++rep) {
        const int n = 2 + meta.uniform_int(0, 15);
        const double k = meta.uniform(0.2, n - 0.2);
        const double tau = meta.uniform(0.3, 1.5);
        std::vector<double> x(static_cast<size_t>(n)), up(static_cast<size_t>(n));
        Rng rng(derive_seed(seed, static_cast<uint64_t>(rep)));
        for (double& v : x) v = rng.uniform(-3.0, 3.0);
        for (double& v : up) v = rng.uniform(-1.0, 1.0);

        auto saved = soft_topk_forward(x, k, tau);
        auto [gx, gk] = soft_topk_vjp(saved, up, tau);

        Tensor xt = Tensor::from({n}, x);
        Tensor fdx = finite_difference_gradient(
            [&](const Tensor& p) {
                auto o = soft_topk_forward(std::span<const double>(p.data(), p.numel()), k, tau);
                double s = 0.0;
                for (size_t i = 0; i < o.values.size(); ++i) s += up[i] * o.values[i];
                return s;
            },
            xt, 1e-5);
        report.max_rel_err = std::max(report.max_rel_err, rel_gap(gx.data(), fdx.data(), gx.size()));

        Tensor kt = Tensor::scalar(k);
        Tensor fdk = finite_difference_gradient(
            [&](const Tensor& p) {
                auto o = soft_topk_forward(x, p.value(), tau);
                double s = 0.0;
                for (size_t i = 0; i < o.values.size(); ++i) s += up[i] * o.values[i];
                return s;
            },
            kt, 1e-5);
        report.max_rel_err = std::max(report.max_rel_err, rel_gap(&gk, fdk.data(), 1));
    }
    report.pass = report.max_rel_err <= report.tolerance;
    return report;
}

GradCheckReport gradcheck_attention(uint64_t seed, int n_cases) {
    GradCheckReport report;
    report.scope = "attention";
    report.cases = n_cases;
    Rng meta(seed);
    for (int rep = 0; rep < n_cases; ++rep) {
        AttentionCall call;
        call.n_q = 2 + meta.uniform_int(0, 3);
        call.t = call.n_q + meta.uniform_int(0, 4);
        call.d = 3 + meta.uniform_int(0, 4);
        call.causal = meta.uniform() < 0.7;
        call.scale = 1.0 / std::sqrt(static_cast<double>(call.d));
        call.query_pos_offset = call.causal ? call.t - call.n_q : 0;
        Rng rng(derive_seed(seed, static_cast<uint64_t>(rep), 2));
        auto fill = [&rng](std::vector<double>& v, size_t n, double lo, double hi) {
            v.resize(n);
            for (double& x : v) x = rng.uniform(lo, hi);
        };
        fill(call.queries, static_cast<size_t>(call.n_q) * call.d, -1.0, 1.0);
        fill(call.keys, static_cast<size_t>(call.t) * call.d, -1.0, 1.0);
        fill(call.values, static_cast<size_t>(call.t) * call.d, -1.0, 1.0);
        fill(call.soft_mask, static_cast<size_t>(call.t), 0.1, 1.0);

        AttentionSaved saved;
        auto out = masked_attention_dense(call, &saved);
        std::vector<double> up;
        fill(up, out.size(), -1.0, 1.0);
        AttentionGrads g = masked_attention_vjp(call, saved, up);

        auto loss_of = [&](const AttentionCall& c) {
            auto o = masked_attention_dense(c);
            double s = 0.0;
            for (size_t i = 0; i < o.size(); ++i) s += up[i] * o[i];
            return s;
        };
        auto fd_field = [&](std::vector<double> AttentionCall::* field, const std::vector<double>& analytic) {
            AttentionCall probe = call;
            std::vector<double> fd((call.*field).size());
            for (size_t i = 0; i < fd.size(); ++i) {
                const double orig = (probe.*field)[i];
                (probe.*field)[i] = orig + 1e-6;
                const double fp = loss_of(probe);
                (probe.*field)[i] = orig - 1e-6;
                const double fm = loss_of(probe);
                (probe.*field)[i] = orig;
                fd[i] = (fp - fm) / 2e-6;
            }
            report.max_rel_err = std::max(report.max_rel_err, rel_gap(analytic.data(), fd.data(), fd.size()));
        };
        fd_field(&AttentionCall::queries, g.queries);
        fd_field(&AttentionCall::keys, g.keys);
        fd_field(&AttentionCall::values, g.values);
        fd_field(&AttentionCall::soft_mask, g.soft_mask);
    }
    report.pass = report.max_rel_err <= report.tolerance;
    return report;
}

GradCheckReport gradcheck_policy(uint64_t seed, int n_cases) {
    GradCheckReport report;
    report.scope = "policy";
    report.cases = n_cases;
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_kv_heads = 2;
    cfg.n_query_heads = 4;
    cfg.head_dim = 8;
    for (int rep = 0; rep < n_cases; ++rep) {
        LkvParams p = init_lkv_params(cfg, derive_seed(seed, static_cast<uint64_t>(rep), 3));
        p.set_requires_grad(true);
        const int t = 8;
        Rng rng(derive_seed(seed, static_cast<uint64_t>(rep), 4));
        Tensor k({t, cfg.head_dim}), v({t, cfg.head_dim}), weights({t});
        for (size_t i = 0; i < k.numel(); ++i) {
            k.data()[i] = rng.uniform(-1.0, 1.0);
            v.data()[i] = rng.uniform(-1.0, 1.0);
        }
        for (int i = 0; i < t; ++i) weights.data()[i] = rng.uniform(-1.0, 1.0);
        const int head = rep % cfg.total_kv_heads();

        auto pipeline = [&]() {
            Tensor scores = head_scores(p);
            BudgetTable table = allocate_budgets(scores, 0.35, cfg.n_layers, cfg.n_kv_heads);
            Tensor u = token_scores(k, v, p.token_scorers[static_cast<size_t>(head)]);
            Tensor b_cont = scale(slice_lastdim(table.ratios, head, 1), static_cast<double>(t));
            Tensor m = training_mask(u, b_cont, 0.8, derive_seed(seed, 5, static_cast<uint64_t>(rep)));
            return sum(mul(m, weights));
        };
        Tensor loss = pipeline();
        GradMap g = backward(loss);

        Tensor ge = g.grad_for(p.head_embeddings);
        Tensor fde = finite_difference_gradient(
            [&](const Tensor& probe) {
                NoGradGuard ng;
                std::vector<double> save(p.head_embeddings.data(),
                                         p.head_embeddings.data() + p.head_embeddings.numel());
                std::copy(probe.data(), probe.data() + probe.numel(), p.head_embeddings.data());
                const double out = pipeline().value();
                std::copy(save.begin(), save.end(), p.head_embeddings.data());
                return out;
            },
            p.head_embeddings, 1e-5);
        report.max_rel_err = std::max(report.max_rel_err, rel_gap(ge.data(), fde.data(), ge.numel()));
    }
    report.pass = report.max_rel_err <= report.tolerance;
    return report;
}

}  // namespace lkv
