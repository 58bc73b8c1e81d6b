// SPDX-License-Identifier: Apache-2.0

#include "lkv/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>
#include <sstream>

#include "lkv/errors.hpp"
#include "lkv/optimizer.hpp"
#include "lkv/parallel.hpp"
#include "lkv/rng.hpp"
#include "lkv/soft_topk.hpp"

namespace lkv {

double anneal_value(const AnnealSchedule& schedule, int step) {
    if (step < 0 || step > schedule.total_steps) throw contract_error("anneal_value: step outside [0, T]");
    const double frac = schedule.total_steps > 0
                            ? static_cast<double>(step) / schedule.total_steps
                            : 1.0;
    if (schedule.kind == ScheduleKind::linear) {
        return schedule.v_init + (schedule.v_final - schedule.v_init) * frac;
    }
    if (!(schedule.v_init > 0.0) || !(schedule.v_final > 0.0)) {
        throw contract_error("anneal_value: exponential schedule needs positive endpoints");
    }
    return schedule.v_init * std::pow(schedule.v_final / schedule.v_init, frac);
}

void TrainConfig::validate() const {
    if (beta < 0.0) throw contract_error("train config: beta must be >= 0");
    if (warmup_steps > total_steps) throw contract_error("train config: warmup_steps must not exceed total_steps");
    if (total_steps < 0 || batch_size < 1) throw contract_error("train config: bad step/batch counts");
    if (!(grad_clip_norm > 0.0)) throw contract_error("train config: grad_clip_norm must be positive");
}

double lr_at(const TrainConfig& config, int step) {
    if (step > config.total_steps) throw contract_error("lr_at: step beyond total_steps");
    if (config.warmup_steps > 0 && step < config.warmup_steps) {
        return config.lr_peak * static_cast<double>(step) / config.warmup_steps;
    }
    const int decay_span = config.total_steps - config.warmup_steps;
    if (decay_span <= 0) return config.lr_peak;
    const double frac = static_cast<double>(step - config.warmup_steps) / decay_span;
    return config.lr_peak + (config.lr_end - config.lr_peak) * frac;
}

Tensor distill_loss(const ForwardTrace& teacher, const ForwardTrace& student, double beta,
                    DistillParts* parts) {
    if (teacher.hidden.size() != student.hidden.size()) {
        throw contract_error("distill_loss: layer-count mismatch");
    }
    if (teacher.logits.shape() != student.logits.shape()) {
        throw contract_error("distill_loss: traces cover different token positions");
    }
    const int n_layers = static_cast<int>(teacher.hidden.size());
    Tensor kl = kl_from_logits(teacher.logits, student.logits);
    Tensor hidden_total = Tensor::scalar(0.0);
    for (int l = 0; l < n_layers; ++l) {
        hidden_total = add(hidden_total,
                           mean(sq_error(teacher.hidden[static_cast<size_t>(l)],
                                         student.hidden[static_cast<size_t>(l)])));
    }
    if (parts) {
        parts->kl = kl.value();
        parts->hidden_mse = hidden_total.value() / n_layers;
    }
    return add(kl, scale(hidden_total, beta / n_layers));
}

void TaskGenConfig::validate() const {
    if (min_len < 32) throw contract_error("task config: min_len must be >= 32");
    if (max_len < min_len) throw contract_error("task config: max_len must be >= min_len");
    if (n_records < 1 || record_repeats < 1) throw contract_error("task config: need at least one record occurrence");
    if (n_records > n_keys) throw contract_error("task config: records need distinct keys");
    // 4 tokens per record occurrence plus the 4-token query tail must fit.
    if (4 * n_records * record_repeats + 4 > min_len) {
        throw contract_error("task config: records do not fit in min_len");
    }
}

TaskSample generate_task(uint64_t seed, const TaskGenConfig& config) {
    config.validate();
    Rng rng(seed);
    const int len = rng.uniform_int(config.min_len, config.max_len + 1);
    const int context_len = len - 4;
    const int n_blocks = config.n_records * config.record_repeats;
    const int filler_len = context_len - 4 * n_blocks;

    // Distinct keys, one record queried.
    std::vector<int> keys(static_cast<size_t>(config.n_keys));
    std::iota(keys.begin(), keys.end(), config.key_base);
    for (int i = config.n_keys - 1; i > 0; --i) {
        std::swap(keys[static_cast<size_t>(i)], keys[static_cast<size_t>(rng.uniform_int(0, i + 1))]);
    }
    struct Record {
        int key, v1, v2;
    };
    std::vector<Record> records(static_cast<size_t>(config.n_records));
    for (int i = 0; i < config.n_records; ++i) {
        records[static_cast<size_t>(i)].key = keys[static_cast<size_t>(i)];
        records[static_cast<size_t>(i)].v1 = config.value_base + rng.uniform_int(0, config.n_values);
        records[static_cast<size_t>(i)].v2 = config.value_base + rng.uniform_int(0, config.n_values);
    }
    // Block starts drawn uniformly over all non-overlapping placements: a
    // distinct sorted sample from {0 .. filler_len + n_blocks - 1} maps
    // bijectively onto valid packings, keeping record depths uniform.
    std::vector<int> picks;
    {
        std::set<int> chosen;
        while (static_cast<int>(chosen.size()) < n_blocks) {
            chosen.insert(rng.uniform_int(0, filler_len + n_blocks));
        }
        picks.assign(chosen.begin(), chosen.end());
    }
    struct Block {
        int record, offset;
    };
    std::vector<Block> blocks(static_cast<size_t>(n_blocks));
    {
        // Random record-to-slot assignment so ordering carries no signal.
        std::vector<int> slot_record;
        for (int i = 0; i < config.n_records; ++i) {
            for (int r = 0; r < config.record_repeats; ++r) slot_record.push_back(i);
        }
        for (int i = n_blocks - 1; i > 0; --i) {
            std::swap(slot_record[static_cast<size_t>(i)],
                      slot_record[static_cast<size_t>(rng.uniform_int(0, i + 1))]);
        }
        for (int i = 0; i < n_blocks; ++i) {
            blocks[static_cast<size_t>(i)].record = slot_record[static_cast<size_t>(i)];
            blocks[static_cast<size_t>(i)].offset = picks[static_cast<size_t>(i)] - i;
        }
    }
    const int queried = rng.uniform_int(0, config.n_records);

    TaskSample s;
    s.tokens.reserve(static_cast<size_t>(len));
    // Filler is a per-sample random motif cycled with a per-sample period, so
    // most positions are predictable by content matching against an earlier
    // occurrence but never by sample-independent statistics.
    const int motif_len = 6 + rng.uniform_int(0, 11);
    std::vector<int> motif(static_cast<size_t>(motif_len));
    for (int& m : motif) m = config.filler_base + rng.uniform_int(0, config.n_filler);
    int filler_used = 0;
    auto push_filler = [&](int count) {
        for (int i = 0; i < count; ++i) {
            s.tokens.push_back(motif[static_cast<size_t>(filler_used + i) % motif.size()]);
        }
        filler_used += count;
    };
    for (const Block& b : blocks) {
        push_filler(b.offset - filler_used);
        const Record& r = records[static_cast<size_t>(b.record)];
        s.tokens.push_back(config.record_marker);
        s.tokens.push_back(r.key);
        s.tokens.push_back(r.v1);
        s.tokens.push_back(r.v2);
    }
    push_filler(filler_len - filler_used);

    const Record& q = records[static_cast<size_t>(queried)];
    s.tokens.push_back(config.query_marker);
    s.tokens.push_back(q.key);
    s.tokens.push_back(q.v1);
    s.tokens.push_back(q.v2);

    s.context_len = context_len;
    s.answer_begin = len - 2;
    s.answer_end = len;
    s.queried_key = q.key;
    return s;
}

std::function<LmSample(uint64_t)> teacher_stream(const TaskGenConfig& task, uint64_t seed,
                                                 uint64_t short_phase, int short_max_len) {
    TaskGenConfig short_task = task;
    short_task.max_len = std::max(task.min_len, std::min(task.max_len, short_max_len));
    return [task, short_task, seed, short_phase](uint64_t idx) {
        const TaskGenConfig& cfg = idx < short_phase ? short_task : task;
        TaskSample s = generate_task(derive_seed(seed, idx), cfg);
        return LmSample{std::move(s.tokens), s.answer_begin, s.answer_end};
    };
}

std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics) {
    std::ostringstream out;
    char buf[320];
    for (const StepMetrics& m : metrics) {
        std::snprintf(buf, sizeof buf,
                      "{\"step\":%d,\"loss\":%.12g,\"kl\":%.12g,\"hidden_mse\":%.12g,"
                      "\"tau\":%.12g,\"ratio\":%.12g,\"lr\":%.12g,\"grad_norm\":%.12g,\"mask_gap\":%.12g",
                      m.step, m.loss, m.kl, m.hidden_mse, m.tau, m.ratio, m.lr, m.grad_norm, m.mask_gap);
        out << buf;
        if (!m.budget_snapshot.empty()) {
            out << ",\"budgets\":[";
            for (size_t i = 0; i < m.budget_snapshot.size(); ++i) {
                std::snprintf(buf, sizeof buf, "%s%.12g", i ? "," : "", m.budget_snapshot[i]);
                out << buf;
            }
            out << "]";
        }
        out << "}\n";
    }
    return out.str();
}

TrainResult train(const ModelWeights& teacher, LkvParams params, const TrainConfig& config,
                  const TaskGenConfig& task_config) {
    config.validate();
    task_config.validate();
    if (!teacher.frozen) throw contract_error("train: teacher must be frozen");
    const ModelConfig& mc = teacher.config;
    if (params.n_layers != mc.n_layers || params.n_kv_heads != mc.n_kv_heads ||
        params.d_head != mc.head_dim) {
        throw contract_error("train: policy geometry does not match the model");
    }

    params.set_requires_grad(true);
    std::vector<Tensor> opt_params;
    for (Tensor* p : params.params()) opt_params.push_back(*p);
    Adam opt(opt_params);

    const int n_heads = params.total_heads();
    TrainResult result;
    result.metrics.reserve(static_cast<size_t>(config.total_steps));

    for (int step = 0; step < config.total_steps; ++step) {
        const double tau = anneal_value(config.tau_schedule, step);
        const double ratio = anneal_value(config.ratio_schedule, step);
        const double lr = lr_at(config, step);

        Tensor scores = head_scores(params);
        BudgetTable table = allocate_budgets(scores, ratio, mc.n_layers, mc.n_kv_heads);

        const int b = config.batch_size;
        std::vector<GradMap> grads(static_cast<size_t>(b));
        std::vector<double> losses(static_cast<size_t>(b), 0.0);
        std::vector<DistillParts> parts(static_cast<size_t>(b));
        std::vector<double> gaps(static_cast<size_t>(b), 0.0);

        parallel_for_index(b, config.n_threads, [&](int i) {
            const uint64_t sample_seed = derive_seed(config.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(i));
            TaskSample sample = generate_task(sample_seed, task_config);
            const int t = static_cast<int>(sample.tokens.size());

            ForwardTrace teacher_trace;
            {
                NoGradGuard ng;
                teacher_trace = forward_full(teacher, sample.tokens);
            }

            std::vector<Tensor> masks(static_cast<size_t>(n_heads));
            double max_gap = 0.0;
            for (int hidx = 0; hidx < n_heads; ++hidx) {
                Tensor u = token_scores(teacher_trace.keys[static_cast<size_t>(hidx)],
                                        teacher_trace.values[static_cast<size_t>(hidx)],
                                        params.token_scorers[static_cast<size_t>(hidx)]);
                Tensor b_cont = scale(slice_lastdim(table.ratios, hidx, 1), static_cast<double>(t));
                const uint64_t noise_seed =
                    derive_seed(config.seed, static_cast<uint64_t>(step),
                                static_cast<uint64_t>(i) << 16 | static_cast<uint64_t>(hidx), 0xa5);
                Tensor m = training_mask(u, b_cont, tau, noise_seed);
                double msum = 0.0;
                for (int j = 0; j < t; ++j) msum += m.data()[j];
                max_gap = std::max(max_gap, std::fabs(msum - b_cont.value()) / t);
                masks[static_cast<size_t>(hidx)] = m;
            }
            gaps[static_cast<size_t>(i)] = max_gap;

            ForwardTrace student_trace = forward_masked(teacher, sample.tokens, masks);
            Tensor loss = distill_loss(teacher_trace, student_trace, config.beta, &parts[static_cast<size_t>(i)]);
            losses[static_cast<size_t>(i)] = loss.value();
            grads[static_cast<size_t>(i)] = backward(loss);
        });

        double loss_mean = 0.0, kl_mean = 0.0, mse_mean = 0.0, gap_max = 0.0;
        GradMap merged;
        for (int i = 0; i < b; ++i) {
            loss_mean += losses[static_cast<size_t>(i)];
            kl_mean += parts[static_cast<size_t>(i)].kl;
            mse_mean += parts[static_cast<size_t>(i)].hidden_mse;
            gap_max = std::max(gap_max, gaps[static_cast<size_t>(i)]);
            for (const Tensor& p : opt_params) {
                if (grads[static_cast<size_t>(i)].contains(p)) {
                    merged.accumulate(p, grads[static_cast<size_t>(i)].grad_for(p));
                }
            }
        }
        const double inv_b = 1.0 / b;
        loss_mean *= inv_b;
        kl_mean *= inv_b;
        mse_mean *= inv_b;
        if (!std::isfinite(loss_mean)) {
            char msg[160];
            std::snprintf(msg, sizeof msg, "train: non-finite loss at step %d (tau=%.6g, ratio=%.6g)",
                          step, tau, ratio);
            throw numeric_error(msg);
        }

        const double norm = global_grad_norm(opt_params, merged) * inv_b;
        const double clip = norm > config.grad_clip_norm ? config.grad_clip_norm / norm : 1.0;
        opt.step(merged, lr, inv_b * clip);

        StepMetrics sm;
        sm.step = step;
        sm.loss = loss_mean;
        sm.kl = kl_mean;
        sm.hidden_mse = mse_mean;
        sm.tau = tau;
        sm.ratio = ratio;
        sm.lr = lr;
        sm.grad_norm = std::min(norm, config.grad_clip_norm);
        sm.mask_gap = gap_max;
        if (config.snapshot_every > 0 && step % config.snapshot_every == 0) {
            sm.budget_snapshot.assign(table.ratios.data(), table.ratios.data() + table.ratios.numel());
        }
        result.metrics.push_back(std::move(sm));
    }

    params.set_requires_grad(false);
    result.params = std::move(params);
    return result;
}

}  // namespace lkv
