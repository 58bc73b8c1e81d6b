// SPDX-License-Identifier: Apache-2.0

#include "lkv/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "lkv/errors.hpp"
#include "lkv/rng.hpp"
#include "lkv/soft_topk.hpp"

namespace lkv {

namespace {

Mlp2 init_mlp2(Rng& rng, int in, int hidden) {
    Mlp2 m;
    m.w1 = Tensor({in, hidden});
    m.b1 = Tensor({hidden});
    m.w2 = Tensor({hidden, 1});
    const double g1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double g2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (size_t i = 0; i < m.w1.numel(); ++i) m.w1.data()[i] = g1 * rng.normal();
    for (size_t i = 0; i < m.w2.numel(); ++i) m.w2.data()[i] = g2 * rng.normal();
    return m;
}

Tensor mlp2_forward(const Mlp2& m, const Tensor& x) {
    Tensor h = silu(add_rowvec(matmul(x, m.w1), m.b1));
    Tensor s = matmul(h, m.w2);  // [rows x 1]
    return reshape(s, {x.dim(0)});
}

// Clamps entries into (lo, hi) and rescales the rest so the table keeps its
// sum. A couple of passes settle even aggressive targets.
void clamp_and_renormalize(std::vector<double>& r, double target_sum) {
    const double lo = 1e-6, hi = 1.0 - 1e-6;
    for (int pass = 0; pass < 16; ++pass) {
        double clamped_sum = 0.0, free_sum = 0.0;
        for (double v : r) {
            if (v >= hi || v <= lo) clamped_sum += std::clamp(v, lo, hi);
            else free_sum += v;
        }
        bool any_out = false;
        for (double& v : r) {
            if (v > hi || v < lo) any_out = true;
        }
        if (!any_out) break;
        const double want = target_sum - clamped_sum;
        const double f = free_sum > 0.0 ? want / free_sum : 1.0;
        for (double& v : r) {
            if (v > hi) v = hi;
            else if (v < lo) v = lo;
            else v *= f;
        }
    }
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> LkvParams::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("head_embeddings", &head_embeddings);
    out.emplace_back("head_predictor.w1", &head_predictor.w1);
    out.emplace_back("head_predictor.b1", &head_predictor.b1);
    out.emplace_back("head_predictor.w2", &head_predictor.w2);
    for (size_t i = 0; i < token_scorers.size(); ++i) {
        const std::string p = "token_scorers." + std::to_string(i) + ".";
        out.emplace_back(p + "w1", &token_scorers[i].w1);
        out.emplace_back(p + "b1", &token_scorers[i].b1);
        out.emplace_back(p + "w2", &token_scorers[i].w2);
    }
    return out;
}

std::vector<Tensor*> LkvParams::params() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

void LkvParams::set_requires_grad(bool v) {
    for (Tensor* t : params()) t->set_requires_grad(v);
}

LkvParams init_lkv_params(const ModelConfig& config, uint64_t seed, int d_e) {
    config.validate();
    LkvParams p;
    p.n_layers = config.n_layers;
    p.n_kv_heads = config.n_kv_heads;
    p.d_head = config.head_dim;
    p.d_e = d_e > 0 ? d_e : config.head_dim;
    if (p.d_e % 2 != 0) throw contract_error("init_lkv_params: d_e must be even");
    Rng rng(seed);
    p.head_embeddings = Tensor({p.total_heads(), p.d_e});
    for (size_t i = 0; i < p.head_embeddings.numel(); ++i) p.head_embeddings.data()[i] = 0.1 * rng.normal();
    p.head_predictor = init_mlp2(rng, p.d_e, p.d_e / 2);
    for (int h = 0; h < p.total_heads(); ++h) {
        p.token_scorers.push_back(init_mlp2(rng, 2 * p.d_head, p.d_head));
    }
    return p;
}

Tensor head_scores(const LkvParams& params) {
    return mlp2_forward(params.head_predictor, params.head_embeddings);
}

BudgetTable allocate_budgets(const Tensor& scores, double target_ratio, int n_layers, int n_kv_heads) {
    if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw budget_error("target ratio must lie in (0,1)");
    const int n = n_layers * n_kv_heads;
    if (scores.rank() != 1 || scores.dim(0) != n) throw contract_error("allocate_budgets: score length mismatch");
    BudgetTable table;
    table.n_layers = n_layers;
    table.n_kv_heads = n_kv_heads;
    table.target_ratio = target_ratio;
    table.ratios = soft_topk(scores, Tensor::scalar(target_ratio * n), 1.0);
    return table;
}

std::vector<int> freeze_budgets(const BudgetTable& table, int t) {
    if (t < 1) throw contract_error("freeze_budgets: t must be >= 1");
    std::vector<int> budgets(static_cast<size_t>(table.n_layers * table.n_kv_heads));
    for (size_t i = 0; i < budgets.size(); ++i) {
        budgets[i] = static_cast<int>(std::floor(table.ratios.data()[i] * t));
    }
    return budgets;
}

Tensor token_scores(const Tensor& keys, const Tensor& values, const Mlp2& scorer) {
    if (keys.rank() != 2 || values.rank() != 2 || keys.dim(0) != values.dim(0)) {
        throw contract_error("token_scores: keys/values must be rank-2 with equal first extents");
    }
    return mlp2_forward(scorer, concat_lastdim({keys, values}));
}

Tensor training_mask(const Tensor& u, const Tensor& b_continuous, double tau, uint64_t rng_seed,
                     double noise_scale) {
    if (u.rank() != 1) throw contract_error("training_mask: scores must be rank-1");
    const int t = u.dim(0);
    Tensor noised = u;
    if (noise_scale != 0.0) {
        GumbelNoise g = sample_gumbel(t, rng_seed);
        Tensor noise({t});
        for (int i = 0; i < t; ++i) noise.data()[i] = noise_scale * g.values[static_cast<size_t>(i)];
        noised = add(u, noise);
    }
    return soft_topk(noised, b_continuous, tau);
}

std::vector<int> inference_select(std::span<const double> u, int b) {
    return hard_topk(u, b);
}

BudgetKind budget_kind_from_string(const std::string& s) {
    if (s == "learned") return BudgetKind::learned;
    if (s == "uniform") return BudgetKind::uniform;
    if (s == "pyramid") return BudgetKind::pyramid;
    if (s == "binary_heads") return BudgetKind::binary_heads;
    throw contract_error("unknown budget policy: " + s);
}

SelectKind select_kind_from_string(const std::string& s) {
    if (s == "learned") return SelectKind::learned;
    if (s == "random") return SelectKind::random;
    if (s == "recency") return SelectKind::recency;
    if (s == "sink_recent") return SelectKind::sink_recent;
    if (s == "attn_window") return SelectKind::attn_window;
    throw contract_error("unknown selection policy: " + s);
}

std::string to_string(BudgetKind k) {
    switch (k) {
        case BudgetKind::learned: return "learned";
        case BudgetKind::uniform: return "uniform";
        case BudgetKind::pyramid: return "pyramid";
        case BudgetKind::binary_heads: return "binary_heads";
    }
    return "?";
}

std::string to_string(SelectKind k) {
    switch (k) {
        case SelectKind::learned: return "learned";
        case SelectKind::random: return "random";
        case SelectKind::recency: return "recency";
        case SelectKind::sink_recent: return "sink_recent";
        case SelectKind::attn_window: return "attn_window";
    }
    return "?";
}

BudgetTable baseline_budget(BudgetKind kind, int n_layers, int n_kv_heads, double target_ratio,
                            double high_fraction) {
    if (!(target_ratio > 0.0 && target_ratio < 1.0)) throw budget_error("target ratio must lie in (0,1)");
    const int n = n_layers * n_kv_heads;
    const double target_sum = target_ratio * n;
    std::vector<double> r(static_cast<size_t>(n), target_ratio);
    switch (kind) {
        case BudgetKind::uniform:
            break;
        case BudgetKind::pyramid: {
            // Linear layer decay, weight L-l for layer l, uniform within a layer.
            const double wsum = n_layers * (n_layers + 1) / 2.0;
            for (int l = 0; l < n_layers; ++l) {
                const double rl = target_ratio * n_layers * (n_layers - l) / wsum;
                for (int h = 0; h < n_kv_heads; ++h) r[static_cast<size_t>(l * n_kv_heads + h)] = rl;
            }
            break;
        }
        case BudgetKind::binary_heads: {
            const int n_high = static_cast<int>(std::ceil(high_fraction * n));
            // High heads take 5x the low ratio; scaled to preserve the sum.
            const double low = target_sum / (n + 4.0 * n_high);
            for (int i = 0; i < n; ++i) r[static_cast<size_t>(i)] = i < n_high ? 5.0 * low : low;
            break;
        }
        case BudgetKind::learned:
            throw contract_error("baseline_budget: learned budgets come from allocate_budgets");
    }
    clamp_and_renormalize(r, target_sum);
    BudgetTable table;
    table.n_layers = n_layers;
    table.n_kv_heads = n_kv_heads;
    table.target_ratio = target_ratio;
    table.ratios = Tensor::from({n}, std::move(r));
    return table;
}

std::vector<int> baseline_select(SelectKind kind, const SelectContext& ctx, int b, uint64_t rng_seed) {
    const int t = ctx.t;
    if (b < 0 || b > t) throw budget_error("baseline_select: b outside [0, t]");
    std::vector<int> mask(static_cast<size_t>(t), 0);
    switch (kind) {
        case SelectKind::random: {
            std::vector<int> idx(static_cast<size_t>(t));
            std::iota(idx.begin(), idx.end(), 0);
            Rng rng(rng_seed);
            for (int i = t - 1; i > 0; --i) {
                std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(rng.uniform_int(0, i + 1))]);
            }
            for (int i = 0; i < b; ++i) mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
            break;
        }
        case SelectKind::recency:
            for (int j = t - b; j < t; ++j) mask[static_cast<size_t>(j)] = 1;
            break;
        case SelectKind::sink_recent: {
            const int sinks = std::min(4, b);
            for (int j = 0; j < sinks; ++j) mask[static_cast<size_t>(j)] = 1;
            for (int j = t - (b - sinks); j < t; ++j) mask[static_cast<size_t>(j)] = 1;
            break;
        }
        case SelectKind::attn_window: {
            // Mean attention received from the trailing query rows.
            if (!ctx.keys || ctx.d <= 0) throw contract_error("attn_window: context with keys required");
            const int rows = static_cast<int>(ctx.window_positions.size());
            if (rows == 0) throw contract_error("attn_window: no window rows");
            std::vector<double> received(static_cast<size_t>(t), 0.0);
            std::vector<double> p(static_cast<size_t>(t));
            for (int r = 0; r < rows; ++r) {
                const double* q = ctx.window_queries.data() + static_cast<size_t>(r) * ctx.d;
                const int end = std::min(t, ctx.window_positions[static_cast<size_t>(r)] + 1);
                double mx = -1e308;
                for (int j = 0; j < end; ++j) {
                    const double* k = ctx.keys->data() + static_cast<size_t>(j) * ctx.d;
                    double dot = 0.0;
                    for (int c = 0; c < ctx.d; ++c) dot += q[c] * k[c];
                    p[static_cast<size_t>(j)] = ctx.scale * dot;
                    mx = std::max(mx, p[static_cast<size_t>(j)]);
                }
                double z = 0.0;
                for (int j = 0; j < end; ++j) {
                    p[static_cast<size_t>(j)] = std::exp(p[static_cast<size_t>(j)] - mx);
                    z += p[static_cast<size_t>(j)];
                }
                for (int j = 0; j < end; ++j) received[static_cast<size_t>(j)] += p[static_cast<size_t>(j)] / z;
            }
            for (double& v : received) v /= rows;
            return hard_topk(received, b);
        }
        case SelectKind::learned:
            throw contract_error("baseline_select: learned selection comes from token scorers");
    }
    return mask;
}

ParamCounts param_count(int n_layers, int n_kv_heads, int d_head, int d_e) {
    if (n_layers < 1 || n_kv_heads < 1 || d_head < 1 || d_e < 1) throw contract_error("param_count: bad geometry");
    ParamCounts c;
    const int64_t heads = static_cast<int64_t>(n_layers) * n_kv_heads;
    c.embeddings = heads * d_e;
    c.head_predictor = static_cast<int64_t>(d_e) * (d_e / 2) + d_e / 2 + d_e / 2;
    c.per_scorer = static_cast<int64_t>(2 * d_head) * d_head + d_head + d_head;
    c.scorers_total = heads * c.per_scorer;
    c.total = c.embeddings + c.head_predictor + c.scorers_total;
    return c;
}

std::string budget_table_csv(const BudgetTable& table) {
    std::string out = "layer,head,ratio\n";
    char buf[64];
    for (int l = 0; l < table.n_layers; ++l) {
        for (int h = 0; h < table.n_kv_heads; ++h) {
            std::snprintf(buf, sizeof buf, "%d,%d,%.6f\n", l, h, table.at(l, h));
            out += buf;
        }
    }
    return out;
}

}  // namespace lkv
