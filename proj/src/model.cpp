// SPDX-License-Identifier: Apache-2.0

#include "lkv/model.hpp"

#include <Eigen/Core>

#include <cmath>
#include <mutex>

#include "lkv/attention.hpp"
#include "lkv/errors.hpp"
#include "lkv/optimizer.hpp"
#include "lkv/parallel.hpp"
#include "lkv/rng.hpp"

namespace lkv {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

Tensor init_matrix(Rng& rng, int rows, int cols, double gain) {
    Tensor t({rows, cols});
    for (size_t i = 0; i < t.numel(); ++i) t.data()[i] = gain * rng.normal();
    return t;
}

void check_cache_matches(const ModelConfig& a, const ModelConfig& b) {
    if (a.n_layers != b.n_layers || a.n_query_heads != b.n_query_heads ||
        a.n_kv_heads != b.n_kv_heads || a.head_dim != b.head_dim ||
        a.vocab_size != b.vocab_size || a.mlp_width() != b.mlp_width()) {
        throw contract_error("cache/model config mismatch");
    }
}

// Rotary rotation of one row at an absolute position, in place.
void rope_row(double* v, int d, int pos, double base = 10000.0) {
    for (int j = 0; j < d / 2; ++j) {
        const double th = pos * std::pow(base, -2.0 * j / d);
        const double cs = std::cos(th), sn = std::sin(th);
        const double a = v[2 * j], b = v[2 * j + 1];
        v[2 * j] = a * cs - b * sn;
        v[2 * j + 1] = a * sn + b * cs;
    }
}

void rmsnorm_row(const double* x, const double* gain, int d, double* out, double eps = 1e-6) {
    double ms = 0.0;
    for (int c = 0; c < d; ++c) ms += x[c] * x[c];
    const double inv = 1.0 / std::sqrt(ms / d + eps);
    for (int c = 0; c < d; ++c) out[c] = x[c] * gain[c] * inv;
}

ForwardTrace forward_core(const ModelWeights& w, const std::vector<int>& tokens,
                          const std::vector<Tensor>* masks) {
    const ModelConfig& cfg = w.config;
    cfg.validate();
    const int t = static_cast<int>(tokens.size());
    if (t < 1) throw contract_error("forward: empty token sequence");
    if (t > cfg.max_seq_len) throw contract_error("forward: sequence exceeds max_seq_len");
    for (int tok : tokens) {
        if (tok < 0 || tok >= cfg.vocab_size) throw contract_error("forward: token id out of vocab");
    }
    if (masks) {
        if (static_cast<int>(masks->size()) != cfg.total_kv_heads()) {
            throw contract_error("forward_masked: one mask per kv head per layer required");
        }
        for (const Tensor& m : *masks) {
            if (m.rank() != 1 || m.dim(0) != t) throw contract_error("forward_masked: mask length must equal t");
        }
    }

    std::vector<int> positions(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;
    const int d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    ForwardTrace trace;
    trace.hidden.reserve(static_cast<size_t>(cfg.n_layers));
    trace.keys.resize(static_cast<size_t>(cfg.total_kv_heads()));
    trace.values.resize(static_cast<size_t>(cfg.total_kv_heads()));

    Tensor x = embedding_rows(w.tok_embed, tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
        Tensor h = rmsnorm(x, lw.attn_norm);
        Tensor q_all = matmul(h, lw.wq);
        Tensor k_all = matmul(h, lw.wk);
        Tensor v_all = matmul(h, lw.wv);

        std::vector<Tensor> k_heads(static_cast<size_t>(cfg.n_kv_heads));
        std::vector<Tensor> v_heads(static_cast<size_t>(cfg.n_kv_heads));
        for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
            k_heads[static_cast<size_t>(kh)] = rope(slice_lastdim(k_all, kh * d, d), positions);
            v_heads[static_cast<size_t>(kh)] = slice_lastdim(v_all, kh * d, d);
            trace.keys[static_cast<size_t>(l * cfg.n_kv_heads + kh)] = k_heads[static_cast<size_t>(kh)];
            trace.values[static_cast<size_t>(l * cfg.n_kv_heads + kh)] = v_heads[static_cast<size_t>(kh)];
        }

        std::vector<Tensor> head_outs(static_cast<size_t>(cfg.n_query_heads));
        for (int qh = 0; qh < cfg.n_query_heads; ++qh) {
            const int kh = qh / cfg.group_size();
            Tensor qh_t = rope(slice_lastdim(q_all, qh * d, d), positions);
            Tensor mask;  // undefined = no mask
            if (masks) mask = (*masks)[static_cast<size_t>(l * cfg.n_kv_heads + kh)];
            head_outs[static_cast<size_t>(qh)] =
                masked_attention(qh_t, k_heads[static_cast<size_t>(kh)], v_heads[static_cast<size_t>(kh)],
                                 mask, /*causal=*/true, scale, /*query_pos_offset=*/0,
                                 /*self_always_retained=*/true);
        }
        x = add(x, matmul(concat_lastdim(head_outs), lw.wo));

        Tensor h2 = rmsnorm(x, lw.mlp_norm);
        Tensor gate = silu(matmul(h2, lw.w_gate));
        Tensor up = matmul(h2, lw.w_up);
        x = add(x, matmul(mul(gate, up), lw.w_down));
        trace.hidden.push_back(x);
    }
    trace.logits = matmul(rmsnorm(x, w.final_norm), w.lm_head);
    return trace;
}

}  // namespace

void ModelConfig::validate() const {
    if (n_layers < 1 || n_query_heads < 1 || n_kv_heads < 1 || head_dim < 1 || vocab_size < 1 ||
        max_seq_len < 1) {
        throw contract_error("model config: extents must be >= 1");
    }
    if (n_query_heads % n_kv_heads != 0) throw contract_error("model config: n_query_heads must divide by n_kv_heads");
    if (head_dim % 2 != 0) throw contract_error("model config: head_dim must be even for rotary pairs");
}

std::vector<Tensor*> ModelWeights::params() {
    std::vector<Tensor*> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
}

std::vector<std::pair<std::string, Tensor*>> ModelWeights::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_embed", &tok_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        LayerWeights& lw = layers[l];
        out.emplace_back(p + "wq", &lw.wq);
        out.emplace_back(p + "wk", &lw.wk);
        out.emplace_back(p + "wv", &lw.wv);
        out.emplace_back(p + "wo", &lw.wo);
        out.emplace_back(p + "attn_norm", &lw.attn_norm);
        out.emplace_back(p + "mlp_norm", &lw.mlp_norm);
        out.emplace_back(p + "w_gate", &lw.w_gate);
        out.emplace_back(p + "w_up", &lw.w_up);
        out.emplace_back(p + "w_down", &lw.w_down);
    }
    out.emplace_back("final_norm", &final_norm);
    out.emplace_back("lm_head", &lm_head);
    return out;
}

void ModelWeights::set_requires_grad(bool v) {
    for (Tensor* t : params()) t->set_requires_grad(v);
}

KvCache make_cache(const ModelConfig& config) {
    KvCache cache;
    cache.config = config;
    cache.heads.resize(static_cast<size_t>(config.total_kv_heads()));
    return cache;
}

ModelWeights init_model(const ModelConfig& config) {
    config.validate();
    ModelWeights w;
    w.config = config;
    Rng rng(config.rng_seed);
    const int dm = config.d_model();
    const int dkv = config.n_kv_heads * config.head_dim;
    const int dff = config.mlp_width();
    w.tok_embed = init_matrix(rng, config.vocab_size, dm, 0.02);
    for (int l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = init_matrix(rng, dm, dm, 0.02);
        lw.wk = init_matrix(rng, dm, dkv, 0.02);
        lw.wv = init_matrix(rng, dm, dkv, 0.02);
        lw.wo = init_matrix(rng, dm, dm, 0.02);
        lw.attn_norm = Tensor::full({dm}, 1.0);
        lw.mlp_norm = Tensor::full({dm}, 1.0);
        lw.w_gate = init_matrix(rng, dm, dff, 0.02);
        lw.w_up = init_matrix(rng, dm, dff, 0.02);
        lw.w_down = init_matrix(rng, dff, dm, 0.02);
        w.layers.push_back(std::move(lw));
    }
    w.final_norm = Tensor::full({dm}, 1.0);
    w.lm_head = init_matrix(rng, dm, config.vocab_size, 0.02);
    return w;
}

ForwardTrace forward_full(const ModelWeights& weights, const std::vector<int>& tokens) {
    return forward_core(weights, tokens, nullptr);
}

ForwardTrace forward_masked(const ModelWeights& weights, const std::vector<int>& tokens,
                            const std::vector<Tensor>& soft_masks) {
    return forward_core(weights, tokens, &soft_masks);
}

std::vector<double> decode_step(const ModelWeights& weights, KvCache& cache, int token) {
    const ModelConfig& cfg = weights.config;
    check_cache_matches(cfg, cache.config);
    if (static_cast<int>(cache.heads.size()) != cfg.total_kv_heads()) {
        throw contract_error("decode_step: cache head count mismatch");
    }
    if (token < 0 || token >= cfg.vocab_size) throw contract_error("decode_step: token id out of vocab");
    if (cache.tokens_seen >= cfg.max_seq_len) throw contract_error("decode_step: sequence exceeds max_seq_len");

    const int pos = cache.tokens_seen;
    const int dm = cfg.d_model();
    const int d = cfg.head_dim;
    const int dkv = cfg.n_kv_heads * d;
    const int dff = cfg.mlp_width();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<double> x(weights.tok_embed.data() + static_cast<size_t>(token) * dm,
                          weights.tok_embed.data() + static_cast<size_t>(token + 1) * dm);
    std::vector<double> h(static_cast<size_t>(dm)), q(static_cast<size_t>(dm));
    std::vector<double> kv(static_cast<size_t>(dkv)), vv(static_cast<size_t>(dkv));
    std::vector<double> attn_out(static_cast<size_t>(dm));
    std::vector<double> g1(static_cast<size_t>(dff)), g2(static_cast<size_t>(dff));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = weights.layers[static_cast<size_t>(l)];
        rmsnorm_row(x.data(), lw.attn_norm.data(), dm, h.data());
        Eigen::Map<const Eigen::RowVectorXd> hv(h.data(), dm);
        Eigen::Map<Eigen::RowVectorXd>(q.data(), dm).noalias() = hv * ConstMap(lw.wq.data(), dm, dm);
        Eigen::Map<Eigen::RowVectorXd>(kv.data(), dkv).noalias() = hv * ConstMap(lw.wk.data(), dm, dkv);
        Eigen::Map<Eigen::RowVectorXd>(vv.data(), dkv).noalias() = hv * ConstMap(lw.wv.data(), dm, dkv);

        for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
            rope_row(kv.data() + static_cast<size_t>(kh) * d, d, pos);
            HeadCache& hc = cache.head(l, kh);
            hc.keys.insert(hc.keys.end(), kv.begin() + static_cast<size_t>(kh) * d,
                           kv.begin() + static_cast<size_t>(kh + 1) * d);
            hc.values.insert(hc.values.end(), vv.begin() + static_cast<size_t>(kh) * d,
                             vv.begin() + static_cast<size_t>(kh + 1) * d);
            hc.retained_positions.push_back(pos);
        }

        for (int qh = 0; qh < cfg.n_query_heads; ++qh) {
            rope_row(q.data() + static_cast<size_t>(qh) * d, d, pos);
            const HeadCache& hc = cache.head(l, qh / cfg.group_size());
            AttentionCall call;
            call.n_q = 1;
            call.t = hc.retained();
            call.d = d;
            call.queries.assign(q.begin() + static_cast<size_t>(qh) * d,
                                q.begin() + static_cast<size_t>(qh + 1) * d);
            call.keys = hc.keys;
            call.values = hc.values;
            call.causal = false;  // every retained position precedes the query
            call.scale = scale;
            std::vector<double> o = masked_attention_dense(call);
            std::copy(o.begin(), o.end(), attn_out.begin() + static_cast<size_t>(qh) * d);
        }
        Eigen::Map<const Eigen::RowVectorXd> av(attn_out.data(), dm);
        Eigen::Map<Eigen::RowVectorXd> xv(x.data(), dm);
        xv.noalias() += av * ConstMap(lw.wo.data(), dm, dm);

        rmsnorm_row(x.data(), lw.mlp_norm.data(), dm, h.data());
        Eigen::Map<const Eigen::RowVectorXd> h2v(h.data(), dm);
        Eigen::Map<Eigen::RowVectorXd>(g1.data(), dff).noalias() = h2v * ConstMap(lw.w_gate.data(), dm, dff);
        Eigen::Map<Eigen::RowVectorXd>(g2.data(), dff).noalias() = h2v * ConstMap(lw.w_up.data(), dm, dff);
        for (int c = 0; c < dff; ++c) {
            const double v = g1[static_cast<size_t>(c)];
            g1[static_cast<size_t>(c)] = v / (1.0 + std::exp(-v)) * g2[static_cast<size_t>(c)];
        }
        xv.noalias() += Eigen::Map<const Eigen::RowVectorXd>(g1.data(), dff) * ConstMap(lw.w_down.data(), dff, dm);
    }

    rmsnorm_row(x.data(), weights.final_norm.data(), dm, h.data());
    std::vector<double> logits(static_cast<size_t>(cfg.vocab_size));
    Eigen::Map<Eigen::RowVectorXd>(logits.data(), cfg.vocab_size).noalias() =
        Eigen::Map<const Eigen::RowVectorXd>(h.data(), dm) * ConstMap(weights.lm_head.data(), dm, cfg.vocab_size);
    cache.tokens_seen = pos + 1;
    return logits;
}

KvCache cache_from_trace(const ModelConfig& config, const ForwardTrace& trace,
                         const std::vector<std::vector<int>>& hard_masks) {
    if (trace.keys.size() != static_cast<size_t>(config.total_kv_heads())) {
        throw contract_error("cache_from_trace: trace head count mismatch");
    }
    if (hard_masks.size() != trace.keys.size()) throw contract_error("cache_from_trace: one mask per head required");
    KvCache cache = make_cache(config);
    const int d = config.head_dim;
    const int t = trace.keys[0].dim(0);
    for (int idx = 0; idx < config.total_kv_heads(); ++idx) {
        const std::vector<int>& m = hard_masks[static_cast<size_t>(idx)];
        if (static_cast<int>(m.size()) != t) throw contract_error("cache_from_trace: mask length mismatch");
        HeadCache& hc = cache.heads[static_cast<size_t>(idx)];
        const Tensor& k = trace.keys[static_cast<size_t>(idx)];
        const Tensor& v = trace.values[static_cast<size_t>(idx)];
        for (int j = 0; j < t; ++j) {
            if (!m[static_cast<size_t>(j)]) continue;
            hc.keys.insert(hc.keys.end(), k.data() + static_cast<size_t>(j) * d,
                           k.data() + static_cast<size_t>(j + 1) * d);
            hc.values.insert(hc.values.end(), v.data() + static_cast<size_t>(j) * d,
                             v.data() + static_cast<size_t>(j + 1) * d);
            hc.retained_positions.push_back(j);
        }
    }
    cache.tokens_seen = t;
    return cache;
}

ModelWeights pretrain_teacher(ModelWeights weights,
                              const std::function<LmSample(uint64_t)>& sample_at,
                              const PretrainConfig& cfg,
                              std::vector<double>* loss_log) {
    if (cfg.steps < 0) throw contract_error("pretrain_teacher: steps must be >= 0");
    if (cfg.steps > 0) {
        weights.set_requires_grad(true);
        std::vector<Tensor*> param_ptrs = weights.params();
        std::vector<Tensor> params;
        for (Tensor* p : param_ptrs) params.push_back(*p);
        AdamConfig ac;
        ac.beta2 = cfg.adam_beta2;
        Adam opt(params, ac);

        const int vocab = weights.config.vocab_size;
        // Extracts logit rows [lo, hi) as their own tensor.
        auto logit_rows = [vocab](const Tensor& logits, int t, int lo, int hi) {
            Tensor flat = reshape(logits, {1, t * vocab});
            return reshape(slice_lastdim(flat, lo * vocab, (hi - lo) * vocab), {hi - lo, vocab});
        };

        for (int step = 0; step < cfg.steps; ++step) {
            std::vector<GradMap> grads(static_cast<size_t>(cfg.batch_size));
            std::vector<double> losses(static_cast<size_t>(cfg.batch_size), 0.0);
            parallel_for_index(cfg.batch_size, cfg.n_threads, [&](int i) {
                const uint64_t idx = static_cast<uint64_t>(step) * cfg.batch_size + static_cast<uint64_t>(i);
                LmSample sample = sample_at(idx);
                const std::vector<int>& tokens = sample.tokens;
                ForwardTrace trace = forward_full(weights, tokens);
                const int t = static_cast<int>(tokens.size());
                Tensor rows = logit_rows(trace.logits, t, 0, t - 1);
                std::vector<int> targets(tokens.begin() + 1, tokens.end());
                Tensor loss = cross_entropy_logits(rows, targets);
                if (cfg.emphasis_weight > 0.0 && sample.emphasis_end > sample.emphasis_begin) {
                    const int lo = sample.emphasis_begin, hi = sample.emphasis_end;
                    if (lo < 1 || hi > t) throw contract_error("pretrain_teacher: emphasis span out of range");
                    Tensor focus_rows = logit_rows(trace.logits, t, lo - 1, hi - 1);
                    std::vector<int> focus_targets(tokens.begin() + lo, tokens.begin() + hi);
                    loss = add(loss, scale(cross_entropy_logits(focus_rows, focus_targets), cfg.emphasis_weight));
                }
                losses[static_cast<size_t>(i)] = loss.value();
                grads[static_cast<size_t>(i)] = backward(loss);
            });

            GradMap merged;
            for (int i = 0; i < cfg.batch_size; ++i) {
                for (const Tensor& p : params) {
                    if (grads[static_cast<size_t>(i)].contains(p)) {
                        merged.accumulate(p, grads[static_cast<size_t>(i)].grad_for(p));
                    }
                }
            }
            const double inv_b = 1.0 / cfg.batch_size;
            const double norm = global_grad_norm(params, merged) * inv_b;
            const double clip = norm > 1.0 ? 1.0 / norm : 1.0;
            const double lr = cfg.lr * std::min(1.0, static_cast<double>(step + 1) / std::max(1, cfg.warmup_steps));
            opt.step(merged, lr, inv_b * clip);

            if (loss_log) {
                double mean_loss = 0.0;
                for (double l : losses) mean_loss += l;
                loss_log->push_back(mean_loss * inv_b);
            }
        }
    }
    weights.set_requires_grad(false);
    weights.frozen = true;
    return weights;
}

}  // namespace lkv
