// SPDX-License-Identifier: Apache-2.0
//
// Inference-time eviction simulator: layer-by-layer prefill compaction,
// decode over compressed caches, policy comparison grids, storage accounting
// and needle-retrieval evaluation.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lkv/distill.hpp"
#include "lkv/model.hpp"
#include "lkv/policy.hpp"

namespace lkv {

struct MemoryModel {
    int n_layers = 32;
    int n_kv_heads = 8;
    int head_dim = 128;
    double bytes_per_element = 2.0;
    int64_t tokens = 200000;

    void validate() const;
};

struct MemoryReport {
    double full_bytes = 0.0;
    double compressed_bytes = 0.0;
    double reduction_factor = 0.0;
};

// full = L * H_kv * head_dim * 2 (K and V) * bytes * tokens;
// compressed = retention * full; reduction = full / compressed.
MemoryReport kv_memory_bytes(const MemoryModel& model, double retention);
// Same, with per-head integer budgets (floored counts summed).
MemoryReport kv_memory_bytes(const MemoryModel& model, const std::vector<int>& per_head_budgets);

struct EvictionPolicy {
    BudgetKind budget = BudgetKind::uniform;
    SelectKind select = SelectKind::recency;
    const LkvParams* params = nullptr;  // required by learned budgeting/selection
    int window = 8;                     // attn_window observation rows
    double high_fraction = 0.25;        // binary_heads
};

struct SimReport {
    std::string budget_policy;
    std::string select_policy;
    double retention_ratio = 0.0;
    std::vector<int> retained_per_head;  // from the most recent prefill
    double kv_bytes_full = 0.0;
    double kv_bytes_compressed = 0.0;
    double reduction = 0.0;
    double evict_wall_seconds = 0.0;
    int64_t scoring_ops = 0;      // multiply-add count spent scoring tokens
    int64_t peak_kv_values = 0;   // peak float64 KV values held during prefill
    double accuracy = 0.0;
    double mean_answer_kl = 0.0;
    int n_samples = 0;
};

// Budget table a policy implies at ratio R (learned tables come from the
// trained parameters; R >= 1 is handled by callers as "keep everything").
BudgetTable policy_budget_table(const EvictionPolicy& policy, double target_ratio,
                                const ModelConfig& config);

// Layer-by-layer prefill: compute one layer with the full prefix, score its
// tokens per KV head, keep the head's budgeted top scores, compact, continue.
// Peak cache cost is one full-length layer plus the compressed earlier layers.
std::pair<KvCache, SimReport> prefill_with_eviction(const ModelWeights& weights,
                                                    const std::vector<int>& tokens,
                                                    const std::vector<int>& budgets,
                                                    const EvictionPolicy& policy,
                                                    uint64_t seed);

struct EvalOutcome {
    double accuracy = 0.0;
    double mean_kl = 0.0;
    double teacher_accuracy = 0.0;
    SimReport report;
};

// Question-agnostic protocol: the context is compressed before the query
// tokens are seen; query and answer tokens are then decoded over the
// compacted cache with teacher forcing.
EvalOutcome run_needle_eval(const ModelWeights& teacher, const EvictionPolicy& policy,
                            double target_ratio, int n_samples, uint64_t seed,
                            const TaskGenConfig& task_config);

// Full cartesian grid with shared seeds per cell.
std::vector<SimReport> compare_policies(const ModelWeights& teacher,
                                        const std::vector<EvictionPolicy>& grid,
                                        const std::vector<double>& ratios, int n_samples,
                                        uint64_t seed, const TaskGenConfig& task_config);

std::string reports_csv(const std::vector<SimReport>& reports);
std::string reports_json(const std::vector<SimReport>& reports);

}  // namespace lkv
