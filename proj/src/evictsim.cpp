// SPDX-License-Identifier: Apache-2.0

#include "lkv/evictsim.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "lkv/attention.hpp"
#include "lkv/errors.hpp"
#include "lkv/rng.hpp"
#include "lkv/soft_topk.hpp"

namespace lkv {

namespace {

double row_kl_from_logits(const double* t_logits, const double* s_logits, int n) {
    double tmax = t_logits[0], smax = s_logits[0];
    for (int i = 1; i < n; ++i) {
        tmax = std::max(tmax, t_logits[i]);
        smax = std::max(smax, s_logits[i]);
    }
    double tz = 0.0, sz = 0.0;
    for (int i = 0; i < n; ++i) {
        tz += std::exp(t_logits[i] - tmax);
        sz += std::exp(s_logits[i] - smax);
    }
    const double tlz = tmax + std::log(tz), slz = smax + std::log(sz);
    double kl = 0.0;
    for (int i = 0; i < n; ++i) {
        const double lt = t_logits[i] - tlz;
        kl += std::exp(lt) * (lt - (s_logits[i] - slz));
    }
    return kl;
}

int argmax(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
        if (v[i] > v[best]) best = i;
    }
    return best;
}

}  // namespace

void MemoryModel::validate() const {
    if (n_layers < 1 || n_kv_heads < 1 || head_dim < 1 || tokens < 1 || !(bytes_per_element > 0.0)) {
        throw contract_error("memory model: all extents must be positive");
    }
}

MemoryReport kv_memory_bytes(const MemoryModel& model, double retention) {
    model.validate();
    if (!(retention > 0.0) || retention > 1.0) throw budget_error("kv_memory_bytes: retention must lie in (0, 1]");
    MemoryReport r;
    r.full_bytes = static_cast<double>(model.n_layers) * model.n_kv_heads * model.head_dim * 2.0 *
                   model.bytes_per_element * static_cast<double>(model.tokens);
    r.compressed_bytes = retention * r.full_bytes;
    r.reduction_factor = r.full_bytes / r.compressed_bytes;
    return r;
}

MemoryReport kv_memory_bytes(const MemoryModel& model, const std::vector<int>& per_head_budgets) {
    model.validate();
    if (static_cast<int>(per_head_budgets.size()) != model.n_layers * model.n_kv_heads) {
        throw contract_error("kv_memory_bytes: one budget per head required");
    }
    MemoryReport r;
    r.full_bytes = static_cast<double>(model.n_layers) * model.n_kv_heads * model.head_dim * 2.0 *
                   model.bytes_per_element * static_cast<double>(model.tokens);
    double kept = 0.0;
    for (int b : per_head_budgets) kept += static_cast<double>(b);
    r.compressed_bytes = kept * model.head_dim * 2.0 * model.bytes_per_element;
    r.reduction_factor = r.compressed_bytes > 0.0 ? r.full_bytes / r.compressed_bytes
                                                  : std::numeric_limits<double>::infinity();
    return r;
}

BudgetTable policy_budget_table(const EvictionPolicy& policy, double target_ratio,
                                const ModelConfig& config) {
    if (policy.budget == BudgetKind::learned) {
        if (!policy.params) throw contract_error("learned budgeting needs trained parameters");
        NoGradGuard ng;
        return allocate_budgets(head_scores(*policy.params), target_ratio, config.n_layers,
                                config.n_kv_heads);
    }
    return baseline_budget(policy.budget, config.n_layers, config.n_kv_heads, target_ratio,
                           policy.high_fraction);
}

std::pair<KvCache, SimReport> prefill_with_eviction(const ModelWeights& weights,
                                                    const std::vector<int>& tokens,
                                                    const std::vector<int>& budgets,
                                                    const EvictionPolicy& policy,
                                                    uint64_t seed) {
    NoGradGuard ng;
    const ModelConfig& cfg = weights.config;
    cfg.validate();
    const int t = static_cast<int>(tokens.size());
    if (static_cast<int>(budgets.size()) != cfg.total_kv_heads()) {
        throw contract_error("prefill_with_eviction: one budget per head required");
    }
    for (int b : budgets) {
        if (b < 0 || b > t) throw budget_error("prefill_with_eviction: budget outside [0, t]");
    }
    if ((policy.select == SelectKind::learned || policy.budget == BudgetKind::learned) && !policy.params) {
        throw contract_error("prefill_with_eviction: learned policy needs parameters");
    }

    SimReport report;
    report.budget_policy = to_string(policy.budget);
    report.select_policy = to_string(policy.select);
    report.retained_per_head.assign(static_cast<size_t>(cfg.total_kv_heads()), 0);

    std::vector<int> positions(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;
    const int d = cfg.head_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));

    KvCache cache = make_cache(cfg);
    cache.tokens_seen = t;
    int64_t compressed_values_so_far = 0;
    const auto wall_start = std::chrono::steady_clock::now();
    double select_seconds = 0.0;

    Tensor x = embedding_rows(weights.tok_embed, tokens);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = weights.layers[static_cast<size_t>(l)];
        Tensor h = rmsnorm(x, lw.attn_norm);
        Tensor q_all = matmul(h, lw.wq);
        Tensor k_all = matmul(h, lw.wk);
        Tensor v_all = matmul(h, lw.wv);

        // Full-prefix attention for this layer's outputs; eviction only
        // decides what later decode steps get to see.
        std::vector<Tensor> k_heads(static_cast<size_t>(cfg.n_kv_heads));
        std::vector<Tensor> v_heads(static_cast<size_t>(cfg.n_kv_heads));
        for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
            k_heads[static_cast<size_t>(kh)] = rope(slice_lastdim(k_all, kh * d, d), positions);
            v_heads[static_cast<size_t>(kh)] = slice_lastdim(v_all, kh * d, d);
        }
        std::vector<Tensor> q_heads(static_cast<size_t>(cfg.n_query_heads));
        std::vector<Tensor> head_outs(static_cast<size_t>(cfg.n_query_heads));
        for (int qh = 0; qh < cfg.n_query_heads; ++qh) {
            const int kh = qh / cfg.group_size();
            q_heads[static_cast<size_t>(qh)] = rope(slice_lastdim(q_all, qh * d, d), positions);
            head_outs[static_cast<size_t>(qh)] =
                masked_attention(q_heads[static_cast<size_t>(qh)], k_heads[static_cast<size_t>(kh)],
                                 v_heads[static_cast<size_t>(kh)], Tensor(), /*causal=*/true, scale,
                                 0, true);
        }

        // The full-length KV of this one layer is transiently live.
        const int64_t layer_full_values = static_cast<int64_t>(t) * cfg.n_kv_heads * d * 2;
        report.peak_kv_values = std::max(report.peak_kv_values, compressed_values_so_far + layer_full_values);

        // Score, select, compact per KV head.
        for (int kh = 0; kh < cfg.n_kv_heads; ++kh) {
            const int head_idx = l * cfg.n_kv_heads + kh;
            const int b = budgets[static_cast<size_t>(head_idx)];
            const auto t0 = std::chrono::steady_clock::now();
            std::vector<int> mask;
            if (policy.select == SelectKind::learned) {
                Tensor u = token_scores(k_heads[static_cast<size_t>(kh)], v_heads[static_cast<size_t>(kh)],
                                        policy.params->token_scorers[static_cast<size_t>(head_idx)]);
                mask = inference_select(std::span<const double>(u.data(), u.numel()), b);
                // Per token: [k;v] through 2d->d->1 with SiLU.
                report.scoring_ops += static_cast<int64_t>(t) * (2 * d * d + 3 * d);
            } else {
                SelectContext ctx;
                ctx.t = t;
                ctx.d = d;
                std::vector<double> keys_raw(k_heads[static_cast<size_t>(kh)].data(),
                                             k_heads[static_cast<size_t>(kh)].data() +
                                                 k_heads[static_cast<size_t>(kh)].numel());
                ctx.keys = &keys_raw;
                ctx.scale = scale;
                if (policy.select == SelectKind::attn_window) {
                    const int w = std::min(policy.window, t);
                    for (int qh = kh * cfg.group_size(); qh < (kh + 1) * cfg.group_size(); ++qh) {
                        const Tensor& qt = q_heads[static_cast<size_t>(qh)];
                        for (int r = t - w; r < t; ++r) {
                            ctx.window_queries.insert(ctx.window_queries.end(),
                                                      qt.data() + static_cast<size_t>(r) * d,
                                                      qt.data() + static_cast<size_t>(r + 1) * d);
                            ctx.window_positions.push_back(r);
                        }
                    }
                    report.scoring_ops += static_cast<int64_t>(ctx.window_positions.size()) * t * (d + 2);
                } else {
                    report.scoring_ops += t;
                }
                mask = baseline_select(policy.select, ctx, b,
                                       derive_seed(seed, static_cast<uint64_t>(l), static_cast<uint64_t>(kh)));
            }
            select_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

            HeadCache& hc = cache.heads[static_cast<size_t>(head_idx)];
            const Tensor& kt = k_heads[static_cast<size_t>(kh)];
            const Tensor& vt = v_heads[static_cast<size_t>(kh)];
            for (int j = 0; j < t; ++j) {
                if (!mask[static_cast<size_t>(j)]) continue;
                hc.keys.insert(hc.keys.end(), kt.data() + static_cast<size_t>(j) * d,
                               kt.data() + static_cast<size_t>(j + 1) * d);
                hc.values.insert(hc.values.end(), vt.data() + static_cast<size_t>(j) * d,
                                 vt.data() + static_cast<size_t>(j + 1) * d);
                hc.retained_positions.push_back(j);
            }
            report.retained_per_head[static_cast<size_t>(head_idx)] = hc.retained();
            compressed_values_so_far += static_cast<int64_t>(hc.retained()) * d * 2;
        }

        x = add(x, matmul(concat_lastdim(head_outs), lw.wo));
        Tensor h2 = rmsnorm(x, lw.mlp_norm);
        Tensor gate = silu(matmul(h2, lw.w_gate));
        Tensor up = matmul(h2, lw.w_up);
        x = add(x, matmul(mul(gate, up), lw.w_down));
    }

    report.evict_wall_seconds = select_seconds;
    (void)wall_start;

    MemoryModel mm;
    mm.n_layers = cfg.n_layers;
    mm.n_kv_heads = cfg.n_kv_heads;
    mm.head_dim = d;
    mm.bytes_per_element = 8.0;  // float64 host storage
    mm.tokens = t;
    const MemoryReport mr = kv_memory_bytes(mm, budgets);
    report.kv_bytes_full = mr.full_bytes;
    report.kv_bytes_compressed = mr.compressed_bytes;
    report.reduction = mr.reduction_factor;
    return {std::move(cache), std::move(report)};
}

EvalOutcome run_needle_eval(const ModelWeights& teacher, const EvictionPolicy& policy,
                            double target_ratio, int n_samples, uint64_t seed,
                            const TaskGenConfig& task_config) {
    NoGradGuard ng;
    const ModelConfig& cfg = teacher.config;
    EvalOutcome out;
    out.report.budget_policy = to_string(policy.budget);
    out.report.select_policy = to_string(policy.select);
    out.report.retention_ratio = target_ratio;
    out.report.n_samples = n_samples;

    const bool keep_all = target_ratio >= 1.0;
    BudgetTable table;
    if (!keep_all) table = policy_budget_table(policy, target_ratio, cfg);

    int correct = 0, teacher_correct = 0;
    double kl_sum = 0.0;
    double bytes_full = 0.0, bytes_compressed = 0.0;
    for (int s = 0; s < n_samples; ++s) {
        TaskSample sample = generate_task(derive_seed(seed, static_cast<uint64_t>(s)), task_config);
        const int len = static_cast<int>(sample.tokens.size());

        ForwardTrace teacher_trace = forward_full(teacher, sample.tokens);
        bool t_ok = true;
        for (int i = sample.answer_begin; i < sample.answer_end; ++i) {
            const double* row = teacher_trace.logits.data() + static_cast<size_t>(i - 1) * cfg.vocab_size;
            if (argmax(row, cfg.vocab_size) != sample.tokens[static_cast<size_t>(i)]) t_ok = false;
        }
        teacher_correct += t_ok ? 1 : 0;

        std::vector<int> budgets(static_cast<size_t>(cfg.total_kv_heads()), sample.context_len);
        if (!keep_all) budgets = freeze_budgets(table, sample.context_len);

        std::vector<int> context(sample.tokens.begin(), sample.tokens.begin() + sample.context_len);
        auto [cache, rep] = prefill_with_eviction(teacher, context, budgets, policy,
                                                  derive_seed(seed, static_cast<uint64_t>(s), 11));
        out.report.retained_per_head = rep.retained_per_head;
        out.report.scoring_ops += rep.scoring_ops;
        out.report.evict_wall_seconds += rep.evict_wall_seconds;
        out.report.peak_kv_values = std::max(out.report.peak_kv_values, rep.peak_kv_values);
        bytes_full += rep.kv_bytes_full;
        bytes_compressed += rep.kv_bytes_compressed;

        // Teacher-forced decode of query + answer tokens over the compacted cache.
        bool ok = true;
        double sample_kl = 0.0;
        int kl_rows = 0;
        for (int i = sample.context_len; i < len - 1; ++i) {
            std::vector<double> logits = decode_step(teacher, cache, sample.tokens[static_cast<size_t>(i)]);
            const int predicted_index = i + 1;
            if (predicted_index >= sample.answer_begin && predicted_index < sample.answer_end) {
                if (argmax(logits.data(), cfg.vocab_size) != sample.tokens[static_cast<size_t>(predicted_index)]) {
                    ok = false;
                }
                const double* trow = teacher_trace.logits.data() + static_cast<size_t>(i) * cfg.vocab_size;
                sample_kl += row_kl_from_logits(trow, logits.data(), cfg.vocab_size);
                ++kl_rows;
            }
        }
        correct += ok ? 1 : 0;
        kl_sum += kl_rows > 0 ? sample_kl / kl_rows : 0.0;
    }

    out.accuracy = static_cast<double>(correct) / n_samples;
    out.teacher_accuracy = static_cast<double>(teacher_correct) / n_samples;
    out.mean_kl = kl_sum / n_samples;
    out.report.accuracy = out.accuracy;
    out.report.mean_answer_kl = out.mean_kl;
    out.report.kv_bytes_full = bytes_full;
    out.report.kv_bytes_compressed = bytes_compressed;
    out.report.reduction = bytes_compressed > 0.0 ? bytes_full / bytes_compressed
                                                  : std::numeric_limits<double>::infinity();
    return out;
}

std::vector<SimReport> compare_policies(const ModelWeights& teacher,
                                        const std::vector<EvictionPolicy>& grid,
                                        const std::vector<double>& ratios, int n_samples,
                                        uint64_t seed, const TaskGenConfig& task_config) {
    std::vector<SimReport> reports;
    for (double r : ratios) {
        for (const EvictionPolicy& p : grid) {
            EvalOutcome o = run_needle_eval(teacher, p, r, n_samples, seed, task_config);
            o.report.retention_ratio = r;
            o.report.n_samples = n_samples;
            reports.push_back(std::move(o.report));
        }
    }
    return reports;
}

std::string reports_csv(const std::vector<SimReport>& reports) {
    std::string out = "policy_budget,policy_select,ratio,accuracy,mean_kl,kv_bytes,reduction\n";
    char buf[256];
    for (const SimReport& r : reports) {
        std::snprintf(buf, sizeof buf, "%s,%s,%.4f,%.6f,%.8f,%.0f,%.4f\n", r.budget_policy.c_str(),
                      r.select_policy.c_str(), r.retention_ratio, r.accuracy, r.mean_answer_kl,
                      r.kv_bytes_compressed, r.reduction);
        out += buf;
    }
    return out;
}

std::string reports_json(const std::vector<SimReport>& reports) {
    std::ostringstream os;
    char buf[512];
    os << "[\n";
    for (size_t i = 0; i < reports.size(); ++i) {
        const SimReport& r = reports[i];
        std::snprintf(buf, sizeof buf,
                      "  {\"policy_budget\":\"%s\",\"policy_select\":\"%s\",\"ratio\":%.6g,"
                      "\"accuracy\":%.6g,\"mean_kl\":%.8g,\"kv_bytes_full\":%.6g,"
                      "\"kv_bytes_compressed\":%.6g,\"reduction\":%.6g,\"scoring_ops\":%lld,"
                      "\"peak_kv_values\":%lld,\"n_samples\":%d,\"retained_per_head\":[",
                      r.budget_policy.c_str(), r.select_policy.c_str(), r.retention_ratio, r.accuracy,
                      r.mean_answer_kl, r.kv_bytes_full, r.kv_bytes_compressed, r.reduction,
                      static_cast<long long>(r.scoring_ops), static_cast<long long>(r.peak_kv_values),
                      r.n_samples);
        os << buf;
        for (size_t j = 0; j < r.retained_per_head.size(); ++j) {
            os << (j ? "," : "") << r.retained_per_head[j];
        }
        os << "]}" << (i + 1 < reports.size() ? "," : "") << "\n";
    }
    os << "]\n";
    return os.str();
}

}  // namespace lkv
