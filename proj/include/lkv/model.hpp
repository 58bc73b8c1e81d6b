// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer with grouped-query attention and an explicit
// per-head KV cache. Serves as the frozen teacher, the soft-masked student
// and the host model for the eviction simulator.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lkv/tensor.hpp"

namespace lkv {

struct ModelConfig {
    int n_layers = 4;
    int n_query_heads = 8;
    int n_kv_heads = 2;
    int head_dim = 16;
    int vocab_size = 256;
    int max_seq_len = 512;
    uint64_t rng_seed = 1234;
    int mlp_hidden = 0;  // 0 picks 2 * d_model

    int d_model() const { return n_query_heads * head_dim; }
    int group_size() const { return n_query_heads / n_kv_heads; }
    int total_kv_heads() const { return n_layers * n_kv_heads; }
    int mlp_width() const { return mlp_hidden > 0 ? mlp_hidden : 2 * d_model(); }
    void validate() const;
};

struct LayerWeights {
    Tensor wq, wk, wv, wo;
    Tensor attn_norm, mlp_norm;
    Tensor w_gate, w_up, w_down;
};

struct ModelWeights {
    ModelConfig config;
    Tensor tok_embed;  // [vocab x d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm;
    Tensor lm_head;  // [d_model x vocab]
    bool frozen = false;

    std::vector<Tensor*> params();
    std::vector<std::pair<std::string, Tensor*>> named_params();
    void set_requires_grad(bool v);
};

// Per-KV-head retained key/value rows plus their original token indices.
struct HeadCache {
    std::vector<double> keys;    // retained x head_dim, rotary already applied
    std::vector<double> values;  // retained x head_dim
    std::vector<int> retained_positions;  // strictly increasing
    int retained() const { return static_cast<int>(retained_positions.size()); }
};

struct KvCache {
    ModelConfig config;
    int tokens_seen = 0;
    std::vector<HeadCache> heads;  // layer-major, index l * n_kv_heads + h

    HeadCache& head(int layer, int kv_head) { return heads[static_cast<size_t>(layer * config.n_kv_heads + kv_head)]; }
    const HeadCache& head(int layer, int kv_head) const {
        return heads[static_cast<size_t>(layer * config.n_kv_heads + kv_head)];
    }
};

KvCache make_cache(const ModelConfig& config);

struct ForwardTrace {
    Tensor logits;               // [t x vocab]
    std::vector<Tensor> hidden;  // per layer, post-residual [t x d_model]
    std::vector<Tensor> keys;    // per (l,h) [t x head_dim], rotary applied
    std::vector<Tensor> values;  // per (l,h) [t x head_dim]
};

// Deterministic initialization: normal weights with gain 0.02, unit norms.
ModelWeights init_model(const ModelConfig& config);

// Full causal forward over the whole sequence.
ForwardTrace forward_full(const ModelWeights& weights, const std::vector<int>& tokens);

// Forward where every attention call applies the per-(layer, kv-head) soft
// mask multiplicatively. A query's own position always keeps weight 1.
ForwardTrace forward_masked(const ModelWeights& weights, const std::vector<int>& tokens,
                            const std::vector<Tensor>& soft_masks);

// Appends the token's K/V to every head, attends over retained positions plus
// the new entry, and returns next-token logits. Mutates the cache in place.
std::vector<double> decode_step(const ModelWeights& weights, KvCache& cache, int token);

// Builds a cache holding the retained subset of a trace's K/V per head.
// Masks are binary vectors over the traced positions, one per (l,h).
KvCache cache_from_trace(const ModelConfig& config, const ForwardTrace& trace,
                         const std::vector<std::vector<int>>& hard_masks);

// One next-token training sequence; the emphasis span (half-open token index
// range) receives extra loss weight so sparse retrieval targets are not
// drowned out by filler statistics.
struct LmSample {
    std::vector<int> tokens;
    int emphasis_begin = 0;
    int emphasis_end = 0;
};

struct PretrainConfig {
    int steps = 2000;
    int batch_size = 4;
    double lr = 1e-3;
    int warmup_steps = 50;
    double emphasis_weight = 4.0;
    double adam_beta2 = 0.99;  // tiny nets adapt faster than the 0.999 default
    uint64_t seed = 99;
    int n_threads = 1;
};

// Cross-entropy language-model training on a sample stream indexed by a
// deterministic id. Returns the weights marked frozen.
ModelWeights pretrain_teacher(ModelWeights weights,
                              const std::function<LmSample(uint64_t)>& sample_at,
                              const PretrainConfig& cfg,
                              std::vector<double>* loss_log = nullptr);

}  // namespace lkv
