// SPDX-License-Identifier: Apache-2.0
//
// Self-distillation trainer. The teacher and student share one frozen
// backbone; the student differs only through per-head soft retention masks.
// Each step anneals the selection temperature and the global retention ratio
// exponentially, scores heads and tokens, relaxes the masks, and updates the
// policy parameters against a KL + hidden-state objective.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lkv/model.hpp"
#include "lkv/policy.hpp"
#include "lkv/tensor.hpp"

namespace lkv {

enum class ScheduleKind { exponential, linear };

struct AnnealSchedule {
    ScheduleKind kind = ScheduleKind::exponential;
    double v_init = 1.0;
    double v_final = 1.0;
    int total_steps = 1;
};

// value(0) = v_init, value(T) = v_final; exponential interpolates
// v_init * (v_final / v_init)^(step / T).
double anneal_value(const AnnealSchedule& schedule, int step);

struct TrainConfig {
    double beta = 0.5;
    AnnealSchedule tau_schedule{ScheduleKind::exponential, 1.0, 0.001, 1000};
    AnnealSchedule ratio_schedule{ScheduleKind::exponential, 0.5, 0.15, 1000};
    double lr_peak = 1e-3;
    double lr_end = 1e-4;
    int warmup_steps = 20;
    int total_steps = 1000;
    int batch_size = 8;
    double grad_clip_norm = 1.0;
    uint64_t seed = 7;
    int snapshot_every = 100;
    int n_threads = 2;

    void validate() const;
};

// Linear warmup 0 -> lr_peak over warmup_steps, then linear decay to lr_end
// at total_steps.
double lr_at(const TrainConfig& config, int step);

struct DistillParts {
    double kl = 0.0;
    double hidden_mse = 0.0;
};

// KL(P_teacher || P_student) averaged over positions plus (beta / L) times
// the summed per-layer mean squared hidden-state error.
Tensor distill_loss(const ForwardTrace& teacher, const ForwardTrace& student, double beta,
                    DistillParts* parts = nullptr);

// Synthetic retrieval task: key->value records embedded at random depths in
// filler text, then a query key whose value the model must reproduce.
struct TaskGenConfig {
    int min_len = 64;
    int max_len = 256;
    int n_records = 4;
    int record_repeats = 2;  // occurrences of each record, at independent depths
    // token layout inside the byte vocabulary
    int record_marker = 1;
    int query_marker = 2;
    int key_base = 16;
    int n_keys = 32;
    int value_base = 96;
    int n_values = 64;
    int filler_base = 226;
    int n_filler = 24;

    void validate() const;
};

struct TaskSample {
    std::vector<int> tokens;
    int answer_begin = 0;  // [answer_begin, answer_end)
    int answer_end = 0;
    int context_len = 0;  // positions before the query marker
    int queried_key = 0;
};

TaskSample generate_task(uint64_t seed, const TaskGenConfig& config);

// Teacher pretraining stream over the task distribution. The first
// `short_phase` samples come from a shortened copy of the config; induction
// circuits form faster on short sequences and then transfer.
std::function<LmSample(uint64_t)> teacher_stream(const TaskGenConfig& task, uint64_t seed,
                                                 uint64_t short_phase = 0, int short_max_len = 96);

struct StepMetrics {
    int step = 0;
    double loss = 0.0;
    double kl = 0.0;
    double hidden_mse = 0.0;
    double tau = 0.0;
    double ratio = 0.0;
    double lr = 0.0;
    double grad_norm = 0.0;       // post-clip
    double mask_gap = 0.0;        // max over heads of |sum(mask) - r t| / t
    std::vector<double> budget_snapshot;  // filled every snapshot_every steps
};

struct TrainResult {
    LkvParams params;
    std::vector<StepMetrics> metrics;
};

// One metrics record per step, JSON-lines.
std::string metrics_to_jsonl(const std::vector<StepMetrics>& metrics);

TrainResult train(const ModelWeights& teacher, LkvParams params, const TrainConfig& config,
                  const TaskGenConfig& task_config);

}  // namespace lkv
