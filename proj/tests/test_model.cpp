// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lkv/errors.hpp"
#include "lkv/model.hpp"
#include "lkv/rng.hpp"
#include "lkv/soft_topk.hpp"

using namespace lkv;

namespace {

ModelConfig small_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_query_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.head_dim = 8;
    cfg.vocab_size = 64;
    cfg.max_seq_len = 64;
    cfg.rng_seed = 11;
    return cfg;
}

std::vector<int> random_tokens(const ModelConfig& cfg, int t, uint64_t seed) {
    Rng rng(seed);
    std::vector<int> tokens(static_cast<size_t>(t));
    for (int& x : tokens) x = rng.uniform_int(0, cfg.vocab_size);
    return tokens;
}

double linf_rows(const Tensor& a, const std::vector<double>& row, int r) {
    const int cols = a.dim(1);
    double m = 0.0;
    for (int c = 0; c < cols; ++c) {
        m = std::max(m, std::fabs(a.data()[static_cast<size_t>(r) * cols + c] - row[static_cast<size_t>(c)]));
    }
    return m;
}

}  // namespace

TEST_CASE("initialization is deterministic and shaped by the GQA law") {
    ModelConfig cfg = small_config();
    cfg.n_query_heads = 8;
    cfg.n_kv_heads = 2;
    ModelWeights a = init_model(cfg);
    ModelWeights b = init_model(cfg);
    for (size_t i = 0; i < a.tok_embed.numel(); ++i) CHECK(a.tok_embed.data()[i] == b.tok_embed.data()[i]);
    CHECK(a.layers[0].wq.dim(1) == 8 * cfg.head_dim);
    CHECK(a.layers[0].wk.dim(1) == 2 * cfg.head_dim);
    CHECK(a.layers[0].wv.dim(1) == 2 * cfg.head_dim);

    // desk-scale default config produces finite logits
    ModelConfig desk;
    ModelWeights w = init_model(desk);
    ForwardTrace trace = forward_full(w, random_tokens(desk, 12, 5));
    for (size_t i = 0; i < trace.logits.numel(); ++i) CHECK(std::isfinite(trace.logits.data()[i]));
}

TEST_CASE("single-token forward shapes") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    ForwardTrace trace = forward_full(w, {3});
    CHECK(trace.logits.shape() == std::vector<int>{1, cfg.vocab_size});
    for (const Tensor& k : trace.keys) CHECK(k.dim(0) == 1);
    CHECK(static_cast<int>(trace.hidden.size()) == cfg.n_layers);
}

TEST_CASE("token id out of vocab is a contract violation") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    CHECK_THROWS_AS(forward_full(w, {0, cfg.vocab_size}), contract_error);
}

TEST_CASE("causality: permuting early tokens only changes later logits") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    std::vector<int> tokens = random_tokens(cfg, 10, 21);
    std::vector<int> permuted = tokens;
    std::swap(permuted[4], permuted[5]);
    ForwardTrace a = forward_full(w, tokens);
    ForwardTrace b = forward_full(w, permuted);
    for (int r = 0; r < 4; ++r) {
        for (int c = 0; c < cfg.vocab_size; ++c) {
            CHECK(a.logits.data()[static_cast<size_t>(r) * cfg.vocab_size + c] ==
                  b.logits.data()[static_cast<size_t>(r) * cfg.vocab_size + c]);
        }
    }
    double diff = 0.0;
    for (int c = 0; c < cfg.vocab_size; ++c) {
        diff = std::max(diff, std::fabs(a.logits.data()[4 * cfg.vocab_size + c] -
                                        b.logits.data()[4 * cfg.vocab_size + c]));
    }
    CHECK(diff > 0.0);
}

TEST_CASE("prefill-then-decode equals the one-shot forward") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    for (int rep = 0; rep < 20; ++rep) {
        Rng rng(400 + static_cast<uint64_t>(rep));
        const int t = 2 + rng.uniform_int(0, 20);
        std::vector<int> tokens = random_tokens(cfg, t, 500 + static_cast<uint64_t>(rep));

        ForwardTrace full = forward_full(w, tokens);
        KvCache cache = make_cache(cfg);
        std::vector<double> logits;
        for (int i = 0; i < t; ++i) logits = decode_step(w, cache, tokens[static_cast<size_t>(i)]);
        CHECK(linf_rows(full.logits, logits, t - 1) <= 1e-10);
    }
}

TEST_CASE("empty cache plus first token equals forward on one token") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    KvCache cache = make_cache(cfg);
    std::vector<double> logits = decode_step(w, cache, 5);
    ForwardTrace one = forward_full(w, {5});
    CHECK(linf_rows(one.logits, logits, 0) <= 1e-12);
}

TEST_CASE("decode with a mismatched cache is rejected") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    ModelConfig other = cfg;
    other.head_dim = 4;
    KvCache cache = make_cache(other);
    CHECK_THROWS_AS(decode_step(w, cache, 1), contract_error);
}

TEST_CASE("all-one masks reproduce the unmasked forward") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    std::vector<int> tokens = random_tokens(cfg, 9, 31);
    ForwardTrace full = forward_full(w, tokens);
    std::vector<Tensor> masks(static_cast<size_t>(cfg.total_kv_heads()), Tensor::full({9}, 1.0));
    ForwardTrace masked = forward_masked(w, tokens, masks);
    double diff = 0.0;
    for (size_t i = 0; i < full.logits.numel(); ++i) {
        diff = std::max(diff, std::fabs(full.logits.data()[i] - masked.logits.data()[i]));
    }
    CHECK(diff <= 1e-10);
}

TEST_CASE("masking the last position cannot touch causally earlier logits") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    std::vector<int> tokens = random_tokens(cfg, 8, 33);
    std::vector<Tensor> masks(static_cast<size_t>(cfg.total_kv_heads()), Tensor::full({8}, 1.0));
    ForwardTrace base = forward_masked(w, tokens, masks);
    std::vector<Tensor> zeroed = masks;
    for (Tensor& m : zeroed) {
        m = m.detached_clone();
        m.data()[7] = 1e-9;
    }
    ForwardTrace cut = forward_masked(w, tokens, zeroed);
    for (int r = 0; r < 7; ++r) {
        for (int c = 0; c < cfg.vocab_size; ++c) {
            CHECK(base.logits.data()[static_cast<size_t>(r) * cfg.vocab_size + c] ==
                  doctest::Approx(cut.logits.data()[static_cast<size_t>(r) * cfg.vocab_size + c]).epsilon(1e-12));
        }
    }
}

TEST_CASE("gradients flow to soft masks and match finite differences") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    const int t = 6;
    std::vector<int> tokens = random_tokens(cfg, t, 35);
    std::vector<Tensor> masks;
    Rng rng(36);
    for (int i = 0; i < cfg.total_kv_heads(); ++i) {
        Tensor m({t}, true);
        for (int j = 0; j < t; ++j) m.data()[j] = rng.uniform(0.2, 1.0);
        masks.push_back(m);
    }
    ForwardTrace trace = forward_masked(w, tokens, masks);
    Tensor loss = mean(trace.logits);
    GradMap g = backward(loss);

    Rng pick(37);
    for (int probe = 0; probe < 5; ++probe) {
        const int hidx = pick.uniform_int(0, cfg.total_kv_heads());
        const int j = pick.uniform_int(0, t);
        Tensor gm = g.grad_for(masks[static_cast<size_t>(hidx)]);
        bool any_nonzero = false;
        for (int jj = 0; jj < t; ++jj) any_nonzero = any_nonzero || gm.data()[jj] != 0.0;
        CHECK(any_nonzero);

        const double orig = masks[static_cast<size_t>(hidx)].data()[j];
        const double h = 1e-6;
        auto eval = [&](double v) {
            NoGradGuard ng;
            std::vector<Tensor> local;
            for (const Tensor& m : masks) local.push_back(m.detached_clone());
            local[static_cast<size_t>(hidx)].data()[j] = v;
            return mean(forward_masked(w, tokens, local).logits).value();
        };
        const double fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
        CHECK(gm.data()[j] == doctest::Approx(fd).epsilon(2e-4));
    }
}

TEST_CASE("hard-masked forward equals decode over the compacted trace cache") {
    ModelConfig cfg = small_config();
    ModelWeights w = init_model(cfg);
    const int tc = 10, extra = 4;
    std::vector<int> tokens = random_tokens(cfg, tc + extra, 41);
    std::vector<int> context(tokens.begin(), tokens.begin() + tc);

    Rng rng(42);
    std::vector<std::vector<int>> hard(static_cast<size_t>(cfg.total_kv_heads()));
    for (auto& m : hard) {
        m.assign(static_cast<size_t>(tc), 0);
        for (int j = 0; j < tc; ++j) m[static_cast<size_t>(j)] = rng.uniform() < 0.6 ? 1 : 0;
        m[0] = 1;  // keep at least one position
    }

    // Full-sequence masked forward: context masked, appended tokens retained.
    std::vector<Tensor> masks;
    for (const auto& m : hard) {
        Tensor mt({tc + extra});
        for (int j = 0; j < tc; ++j) mt.data()[j] = static_cast<double>(m[static_cast<size_t>(j)]);
        for (int j = tc; j < tc + extra; ++j) mt.data()[j] = 1.0;
        masks.push_back(mt);
    }
    ForwardTrace masked = forward_masked(w, tokens, masks);

    // Decode path: compact the context K/V of a context-only masked forward.
    std::vector<Tensor> ctx_masks;
    for (const auto& m : hard) {
        Tensor mt({tc});
        for (int j = 0; j < tc; ++j) mt.data()[j] = static_cast<double>(m[static_cast<size_t>(j)]);
        ctx_masks.push_back(mt);
    }
    ForwardTrace ctx_trace = forward_masked(w, context, ctx_masks);
    KvCache cache = cache_from_trace(cfg, ctx_trace, hard);

    for (int i = tc; i < tc + extra; ++i) {
        std::vector<double> logits = decode_step(w, cache, tokens[static_cast<size_t>(i)]);
        CHECK(linf_rows(masked.logits, logits, i) <= 1e-8);
    }
}

TEST_CASE("pretraining reduces the language-model loss and freezes the result") {
    ModelConfig cfg = small_config();
    cfg.vocab_size = 32;
    ModelWeights w = init_model(cfg);
    auto stream = [&](uint64_t idx) {
        Rng rng(derive_seed(1000, idx));
        LmSample s;
        s.tokens.resize(24);
        const int phase = rng.uniform_int(0, 4);
        for (int i = 0; i < 24; ++i) s.tokens[static_cast<size_t>(i)] = (i + phase) % 8;
        s.emphasis_begin = 20;
        s.emphasis_end = 24;
        return s;
    };
    PretrainConfig pc;
    pc.steps = 30;
    pc.batch_size = 2;
    pc.lr = 3e-3;
    pc.warmup_steps = 5;
    std::vector<double> losses;
    ModelWeights trained = pretrain_teacher(std::move(w), stream, pc, &losses);
    CHECK(trained.frozen);
    CHECK(losses.front() > losses.back());

    // steps = 0 keeps weights untouched but marks them frozen
    ModelWeights w2 = init_model(cfg);
    std::vector<double> before(w2.tok_embed.data(), w2.tok_embed.data() + w2.tok_embed.numel());
    PretrainConfig none;
    none.steps = 0;
    ModelWeights frozen = pretrain_teacher(std::move(w2), stream, none);
    CHECK(frozen.frozen);
    for (size_t i = 0; i < frozen.tok_embed.numel(); ++i) CHECK(frozen.tok_embed.data()[i] == before[i]);
}
