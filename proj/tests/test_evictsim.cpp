// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lkv/errors.hpp"
#include "lkv/evictsim.hpp"
#include "lkv/rng.hpp"

using namespace lkv;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.vocab_size = 256;
    cfg.max_seq_len = 96;
    cfg.rng_seed = 17;
    return cfg;
}

TaskGenConfig tiny_task() {
    TaskGenConfig t;
    t.min_len = 40;
    t.max_len = 56;
    t.n_records = 2;
    t.record_repeats = 2;
    return t;
}

std::vector<int> random_tokens(const ModelConfig& cfg, int t, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> tokens(static_cast<size_t>(t));
    for (int& x : tokens) x = rng.uniform_int(0, cfg.vocab_size);
    return tokens;
}

}  // namespace

TEST_CASE("KV storage arithmetic reproduces the 8B-geometry fixtures") {
    MemoryModel mm;  // 32 layers, 8 KV heads, d=128, 2 bytes, 200k tokens
    MemoryReport full = kv_memory_bytes(mm, 1.0);
    CHECK(full.full_bytes == doctest::Approx(26214400000.0));
    CHECK(full.reduction_factor == doctest::Approx(1.0));

    MemoryReport r15 = kv_memory_bytes(mm, 0.15);
    CHECK(r15.reduction_factor == doctest::Approx(1.0 / 0.15).epsilon(1e-12));
    CHECK(std::fabs(r15.reduction_factor - 6.67) < 0.01);

    // within 10% of 25.0 GB
    CHECK(std::fabs(full.full_bytes - 25.0e9) / 25.0e9 < 0.10);

    // compressed bytes strictly increase with retention
    double prev = 0.0;
    for (double r : {0.1, 0.2, 0.5, 0.8, 1.0}) {
        MemoryReport rep = kv_memory_bytes(mm, r);
        CHECK(rep.compressed_bytes > prev);
        prev = rep.compressed_bytes;
    }

    CHECK_THROWS_AS(kv_memory_bytes(mm, 0.0), budget_error);
    CHECK_THROWS_AS(kv_memory_bytes(mm, 1.5), budget_error);
}

TEST_CASE("budgeted storage arithmetic floors per head") {
    MemoryModel mm;
    mm.n_layers = 1;
    mm.n_kv_heads = 2;
    mm.head_dim = 4;
    mm.bytes_per_element = 2.0;
    mm.tokens = 100;
    MemoryReport rep = kv_memory_bytes(mm, std::vector<int>{15, 14});
    CHECK(rep.full_bytes == doctest::Approx(2 * 4 * 2.0 * 2 * 100));
    CHECK(rep.compressed_bytes == doctest::Approx((15 + 14) * 4 * 2.0 * 2));
}

TEST_CASE("full budgets keep the whole cache and decode matches the full forward") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    w.frozen = true;
    const int t = 24;
    std::vector<int> tokens = random_tokens(cfg, t, 3);
    std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), t);
    EvictionPolicy pol;
    pol.select = SelectKind::recency;
    auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, pol, 1);
    for (int count : rep.retained_per_head) CHECK(count == t);

    ForwardTrace full = forward_full(w, tokens);
    for (int idx = 0; idx < cfg.total_kv_heads(); ++idx) {
        const HeadCache& hc = cache.heads[static_cast<size_t>(idx)];
        const Tensor& kt = full.keys[static_cast<size_t>(idx)];
        for (size_t i = 0; i < hc.keys.size(); ++i) {
            CHECK(hc.keys[i] == doctest::Approx(kt.data()[i]).epsilon(1e-12));
        }
    }

    // continue decoding: matches one-shot forward over the longer sequence
    std::vector<int> more = random_tokens(cfg, t + 3, 4);
    std::copy(tokens.begin(), tokens.end(), more.begin());
    ForwardTrace longer = forward_full(w, more);
    KvCache c2 = cache;
    for (int i = t; i < t + 3; ++i) {
        std::vector<double> logits = decode_step(w, c2, more[static_cast<size_t>(i)]);
        double gap = 0.0;
        for (int c = 0; c < cfg.vocab_size; ++c) {
            gap = std::max(gap, std::fabs(logits[static_cast<size_t>(c)] -
                                          longer.logits.data()[static_cast<size_t>(i) * cfg.vocab_size + c]));
        }
        CHECK(gap <= 1e-10);
    }
}

TEST_CASE("a zero budget empties the head but decode still runs") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    const int t = 16;
    std::vector<int> tokens = random_tokens(cfg, t, 5);
    std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), t);
    budgets[1] = 0;
    EvictionPolicy pol;
    pol.select = SelectKind::recency;
    auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, pol, 1);
    CHECK(cache.heads[1].retained() == 0);
    std::vector<double> logits = decode_step(w, cache, 7);
    for (double v : logits) CHECK(std::isfinite(v));
}

TEST_CASE("budgets beyond the context length are rejected") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    std::vector<int> tokens = random_tokens(cfg, 8, 6);
    std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), 9);
    EvictionPolicy pol;
    CHECK_THROWS_AS(prefill_with_eviction(w, tokens, budgets, pol, 1), budget_error);
}

TEST_CASE("retained counts equal the frozen floor budgets") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    const int t = 20;
    std::vector<int> tokens = random_tokens(cfg, t, 7);
    BudgetTable table = baseline_budget(BudgetKind::pyramid, cfg.n_layers, cfg.n_kv_heads, 0.4);
    std::vector<int> budgets = freeze_budgets(table, t);
    EvictionPolicy pol;
    pol.select = SelectKind::sink_recent;
    auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, pol, 2);
    for (int idx = 0; idx < cfg.total_kv_heads(); ++idx) {
        CHECK(rep.retained_per_head[static_cast<size_t>(idx)] == budgets[static_cast<size_t>(idx)]);
        CHECK(cache.heads[static_cast<size_t>(idx)].retained() == budgets[static_cast<size_t>(idx)]);
        // retained positions strictly increasing
        const auto& pos = cache.heads[static_cast<size_t>(idx)].retained_positions;
        for (size_t i = 1; i < pos.size(); ++i) CHECK(pos[i] > pos[i - 1]);
    }
}

TEST_CASE("peak cache accounting: one full layer plus compressed earlier layers") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    const int t = 20;
    std::vector<int> tokens = random_tokens(cfg, t, 8);
    std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), 5);
    EvictionPolicy pol;
    pol.select = SelectKind::recency;
    auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, pol, 3);
    // layer 0 full while nothing compressed yet; layer 1 full + layer 0 compressed
    const int64_t full_layer = static_cast<int64_t>(t) * cfg.n_kv_heads * cfg.head_dim * 2;
    const int64_t compressed_layer = static_cast<int64_t>(5) * cfg.n_kv_heads * cfg.head_dim * 2;
    CHECK(rep.peak_kv_values == full_layer + compressed_layer);
}

TEST_CASE("learned scoring cost grows linearly in t") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    LkvParams params = init_lkv_params(cfg, 23);
    EvictionPolicy pol;
    pol.budget = BudgetKind::uniform;
    pol.select = SelectKind::learned;
    pol.params = &params;

    auto ops_at = [&](int t) {
        std::vector<int> tokens = random_tokens(cfg, t, 9);
        std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), t / 2);
        auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, pol, 4);
        return rep.scoring_ops;
    };
    const int64_t ops16 = ops_at(16);
    const int64_t ops32 = ops_at(32);
    const int64_t ops64 = ops_at(64);
    CHECK(ops32 == 2 * ops16);
    CHECK(ops64 == 2 * ops32);

    // the attention-window analog scales with the window times t instead
    EvictionPolicy win;
    win.select = SelectKind::attn_window;
    win.window = 4;
    auto win_ops_at = [&](int t) {
        std::vector<int> tokens = random_tokens(cfg, t, 10);
        std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), t / 2);
        auto [cache, rep] = prefill_with_eviction(w, tokens, budgets, win, 4);
        return rep.scoring_ops;
    };
    CHECK(win_ops_at(32) == 2 * win_ops_at(16));
}

TEST_CASE("needle eval at full retention matches the teacher exactly and reproduces itself") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    w.frozen = true;
    EvictionPolicy pol;
    pol.budget = BudgetKind::uniform;
    pol.select = SelectKind::recency;
    EvalOutcome a = run_needle_eval(w, pol, 1.0, 8, 99, tiny_task());
    CHECK(a.accuracy == a.teacher_accuracy);
    CHECK(a.mean_kl < 1e-12);

    EvalOutcome b = run_needle_eval(w, pol, 1.0, 8, 99, tiny_task());
    CHECK(a.accuracy == b.accuracy);
    CHECK(a.mean_kl == b.mean_kl);
    CHECK(reports_json({a.report}) == reports_json({b.report}));
}

TEST_CASE("policy grids evaluate every cell and serialize") {
    ModelConfig cfg = tiny_config();
    ModelWeights w = init_model(cfg);
    w.frozen = true;
    std::vector<EvictionPolicy> grid;
    {
        EvictionPolicy p;
        p.budget = BudgetKind::uniform;
        p.select = SelectKind::recency;
        grid.push_back(p);
        p.select = SelectKind::random;
        grid.push_back(p);
    }
    std::vector<SimReport> reports = compare_policies(w, grid, {1.0, 0.5}, 4, 5, tiny_task());
    CHECK(reports.size() == 4);

    const std::string csv = reports_csv(reports);
    CHECK(csv.find("policy_budget,policy_select,ratio,accuracy,mean_kl,kv_bytes,reduction\n") == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);

    const std::string json = reports_json(reports);
    CHECK(json.find("\"retained_per_head\"") != std::string::npos);

    // shared seeds: rerunning the grid reproduces the bytes
    std::vector<SimReport> again = compare_policies(w, grid, {1.0, 0.5}, 4, 5, tiny_task());
    CHECK(reports_csv(again) == csv);
    CHECK(reports_json(again) == json);
}
