// SPDX-License-Identifier: Apache-2.0
//
// Attention with a learnable multiplicative soft mask over key positions.
//
// Masking happens in the probability domain: raw softmax first, then an
// element-wise product with the mask, then renormalization. This equals
// softmax(s + log m) V algebraically for positive masks, but the backward
// pass scales mask gradients by the raw probability (bounded in (0, 1])
// instead of 1/m, so gradients stay finite even at m = 0. The log-space
// formulation exists only inside the test suite as an oracle.

#pragma once

#include <vector>

#include "lkv/tensor.hpp"

namespace lkv {

struct AttentionCall {
    int n_q = 0;  // query rows
    int t = 0;    // key/value rows
    int d = 0;    // head width
    std::vector<double> queries;    // n_q x d
    std::vector<double> keys;       // t x d
    std::vector<double> values;     // t x d
    std::vector<double> soft_mask;  // length t; empty means all-ones
    bool causal = true;
    double scale = 0.0;
    // Absolute position of query row 0; row r admits keys j <= offset + r.
    int query_pos_offset = 0;
    // When set, a query's own key position keeps multiplier 1 regardless of
    // the mask, matching decode over a compacted cache where the just-appended
    // entry is never down-weighted.
    bool self_always_retained = false;
};

// State saved by the forward pass for the analytic backward.
struct AttentionSaved {
    std::vector<double> p_raw;   // n_q x t raw softmax over admissible keys
    std::vector<double> p;       // n_q x t renormalized masked weights
    std::vector<double> renorm;  // per-row masked mass, the renormalizer
};

struct AttentionGrads {
    std::vector<double> queries;
    std::vector<double> keys;
    std::vector<double> values;
    std::vector<double> soft_mask;  // empty when the call had no mask
};

void validate_call(const AttentionCall& call);

// Dense reference: per row, p_raw = softmax(s) over admissible positions,
// p~ = p_raw * m, p = p~ / sum(p~), output = p V. Throws
// degenerate_mask_error when a row's masked mass vanishes.
std::vector<double> masked_attention_dense(const AttentionCall& call, AttentionSaved* saved = nullptr);

// One-pass online-softmax over key blocks; each block's exponentials are
// multiplied by the mask slice after exponentiation. Matches the dense path.
std::vector<double> masked_attention_blocked(const AttentionCall& call, int block_size);

// Gradients for queries, keys, values and the mask. The mask path uses
// d p~_i / d m_i = p_raw_i, so no intermediate forms log(m) or 1/m.
AttentionGrads masked_attention_vjp(const AttentionCall& call, const AttentionSaved& saved,
                                    const std::vector<double>& upstream);

// Autodiff bridge over [n_q x d] query, [t x d] key/value tensors and an
// optional rank-1 mask (pass an undefined Tensor for none).
Tensor masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                        bool causal, double scale, int query_pos_offset = 0,
                        bool self_always_retained = false);

}  // namespace lkv
