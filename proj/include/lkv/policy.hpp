// SPDX-License-Identifier: Apache-2.0
//
// Learned eviction policy: a global head budgeter that lets every KV head of
// every layer compete for one flat retention budget, and per-head token
// scorers that predict a token's retention utility from its own key/value
// pair with no query interaction. Simplified baseline budgeting/selection
// policies live here too, for comparison grids.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lkv/model.hpp"
#include "lkv/tensor.hpp"

namespace lkv {

// Two-layer perceptron in -> hidden -> 1, SiLU hidden with bias, no output
// bias. The no-output-bias convention is what makes the parameter-count
// fixtures exact.
struct Mlp2 {
    Tensor w1;  // [in x hidden]
    Tensor b1;  // [hidden]
    Tensor w2;  // [hidden x 1]

    int64_t param_count() const {
        return static_cast<int64_t>(w1.numel() + b1.numel() + w2.numel());
    }
};

struct LkvParams {
    int n_layers = 0;
    int n_kv_heads = 0;
    int d_e = 0;     // head-embedding width
    int d_head = 0;  // token key/value width
    Tensor head_embeddings;          // [L*H_kv x d_e]
    Mlp2 head_predictor;             // d_e -> d_e/2 -> 1, shared
    std::vector<Mlp2> token_scorers;  // one per (l,h): 2*d_head -> d_head -> 1

    int total_heads() const { return n_layers * n_kv_heads; }
    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::vector<Tensor*> params();
    void set_requires_grad(bool v);
};

LkvParams init_lkv_params(const ModelConfig& config, uint64_t seed, int d_e = 0 /* 0 -> head_dim */);

// One scalar score per KV head from its embedding, differentiable.
Tensor head_scores(const LkvParams& params);

struct BudgetTable {
    int n_layers = 0;
    int n_kv_heads = 0;
    Tensor ratios;  // rank-1 [L*H_kv], entries in (0,1), summing to R*L*H_kv
    double target_ratio = 0.0;

    double at(int layer, int head) const {
        return ratios.data()[static_cast<size_t>(layer * n_kv_heads + head)];
    }
};

// Flat relaxed top-k over all head scores with k = R * L * H_kv and unit
// temperature; gradients flow back into the scores.
BudgetTable allocate_budgets(const Tensor& scores, double target_ratio, int n_layers, int n_kv_heads);

// Integer per-head budgets floor(r * t); pure arithmetic, nothing recomputed.
std::vector<int> freeze_budgets(const BudgetTable& table, int t);

// u_i = scorer([k_i ; v_i]), query-agnostic, linear in t.
Tensor token_scores(const Tensor& keys, const Tensor& values, const Mlp2& scorer);

// Relaxed training mask: soft top-k over noised scores at temperature tau.
// b_continuous stays a tensor so budget gradients reach the head predictor.
Tensor training_mask(const Tensor& u, const Tensor& b_continuous, double tau, uint64_t rng_seed,
                     double noise_scale = 1.0);

// Deterministic hard selection on raw scores, no noise, no temperature.
std::vector<int> inference_select(std::span<const double> u, int b);

enum class BudgetKind { learned, uniform, pyramid, binary_heads };
enum class SelectKind { learned, random, recency, sink_recent, attn_window };

BudgetKind budget_kind_from_string(const std::string& s);
SelectKind select_kind_from_string(const std::string& s);
std::string to_string(BudgetKind k);
std::string to_string(SelectKind k);

// uniform: every head at R. pyramid: linear decay over layers, uniform within
// a layer, sum preserved. binary_heads: ceil(high_fraction * L * H) heads high,
// the rest low, sum preserved.
BudgetTable baseline_budget(BudgetKind kind, int n_layers, int n_kv_heads, double target_ratio,
                            double high_fraction = 0.25);

// Inputs a selection baseline may look at. Only attn_window touches queries.
struct SelectContext {
    int t = 0;
    int d = 0;
    const std::vector<double>* keys = nullptr;     // t x d
    std::vector<double> window_queries;            // rows x d, trailing query rows
    std::vector<int> window_positions;             // absolute positions of those rows
    double scale = 0.0;
};

std::vector<int> baseline_select(SelectKind kind, const SelectContext& ctx, int b, uint64_t rng_seed);

struct ParamCounts {
    int64_t embeddings = 0;
    int64_t head_predictor = 0;
    int64_t per_scorer = 0;
    int64_t scorers_total = 0;
    int64_t total = 0;
};

ParamCounts param_count(int n_layers, int n_kv_heads, int d_head, int d_e);

// CSV with header layer,head,ratio; ratios printed with 6 decimals.
std::string budget_table_csv(const BudgetTable& table);

}  // namespace lkv
