// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lkv/distill.hpp"
#include "lkv/errors.hpp"
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
    cfg.rng_seed = 5;
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

}  // namespace

TEST_CASE("exponential annealing endpoints and midpoint") {
    AnnealSchedule tau{ScheduleKind::exponential, 1.0, 0.001, 1000};
    CHECK(anneal_value(tau, 0) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(anneal_value(tau, 1000) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(anneal_value(tau, 500) == doctest::Approx(0.0316227766).epsilon(1e-7));

    AnnealSchedule ratio{ScheduleKind::exponential, 0.5, 0.15, 1000};
    CHECK(anneal_value(ratio, 1000) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(anneal_value(ratio, 0) == doctest::Approx(0.5).epsilon(1e-12));

    AnnealSchedule lin{ScheduleKind::linear, 2.0, 1.0, 10};
    CHECK(anneal_value(lin, 5) == doctest::Approx(1.5).epsilon(1e-14));

    CHECK_THROWS_AS(anneal_value(tau, -1), contract_error);
    CHECK_THROWS_AS(anneal_value(tau, 1001), contract_error);
    AnnealSchedule bad{ScheduleKind::exponential, 0.0, 1.0, 10};
    CHECK_THROWS_AS(anneal_value(bad, 1), contract_error);
}

TEST_CASE("learning-rate schedule endpoints and decay midpoint") {
    TrainConfig cfg;
    cfg.lr_peak = 1e-3;
    cfg.lr_end = 1e-4;
    cfg.warmup_steps = 20;
    cfg.total_steps = 1000;
    CHECK(lr_at(cfg, 0) == 0.0);
    CHECK(lr_at(cfg, 20) == doctest::Approx(1e-3).epsilon(1e-14));
    CHECK(lr_at(cfg, 1000) == doctest::Approx(1e-4).epsilon(1e-14));
    CHECK(lr_at(cfg, 510) == doctest::Approx(5.5e-4).epsilon(1e-12));
    CHECK_THROWS_AS(lr_at(cfg, 1001), contract_error);
}

TEST_CASE("distill loss on identical traces is zero; beta scales the hidden term") {
    ForwardTrace t1, t2;
    Rng rng(9);
    t1.logits = Tensor({3, 5});
    for (size_t i = 0; i < t1.logits.numel(); ++i) t1.logits.data()[i] = rng.uniform(-1.0, 1.0);
    t2.logits = t1.logits.detached_clone();
    for (int l = 0; l < 2; ++l) {
        Tensor h({3, 4});
        for (size_t i = 0; i < h.numel(); ++i) h.data()[i] = rng.uniform(-1.0, 1.0);
        t1.hidden.push_back(h);
        t2.hidden.push_back(h.detached_clone());
    }
    CHECK(distill_loss(t1, t2, 0.5).value() == doctest::Approx(0.0).epsilon(1e-10));

    // perturb the student; beta = 0 must reduce to the KL term alone
    t2.hidden[0].data()[1] += 0.4;
    DistillParts parts;
    const double with_beta0 = distill_loss(t1, t2, 0.0, &parts).value();
    CHECK(with_beta0 == doctest::Approx(parts.kl).epsilon(1e-12));
}

TEST_CASE("distill loss matches a hand-computed two-position fixture") {
    ForwardTrace teacher, student;
    teacher.logits = Tensor::from({2, 3}, {1.0, 0.0, -1.0, 0.5, 0.5, 0.0});
    student.logits = Tensor::from({2, 3}, {0.0, 0.0, 0.0, 1.0, -0.5, 0.25});
    teacher.hidden.push_back(Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0}));
    student.hidden.push_back(Tensor::from({2, 2}, {1.0, 1.0, 2.0, 2.0}));
    teacher.hidden.push_back(Tensor::from({2, 2}, {0.0, 0.0, 0.0, 0.0}));
    student.hidden.push_back(Tensor::from({2, 2}, {1.0, 1.0, 1.0, 1.0}));

    // independent scalar arithmetic
    auto row_kl = [](const double* t, const double* s, int n) {
        double tz = 0.0, sz = 0.0;
        for (int i = 0; i < n; ++i) {
            tz += std::exp(t[i]);
            sz += std::exp(s[i]);
        }
        double kl = 0.0;
        for (int i = 0; i < n; ++i) {
            const double pt = std::exp(t[i]) / tz;
            const double ps = std::exp(s[i]) / sz;
            kl += pt * std::log(pt / ps);
        }
        return kl;
    };
    const double kl = 0.5 * (row_kl(teacher.logits.data(), student.logits.data(), 3) +
                             row_kl(teacher.logits.data() + 3, student.logits.data() + 3, 3));
    const double mse0 = (0.0 + 1.0 + 1.0 + 4.0) / 4.0;
    const double mse1 = 1.0;
    const double beta = 0.5;
    const double expected = kl + beta / 2.0 * (mse0 + mse1);

    CHECK(distill_loss(teacher, student, beta).value() == doctest::Approx(expected).epsilon(1e-12));

    // layer-count mismatch is a contract violation
    ForwardTrace shallow;
    shallow.logits = student.logits;
    shallow.hidden.push_back(student.hidden[0]);
    CHECK_THROWS_AS(distill_loss(teacher, shallow, beta), contract_error);
}

TEST_CASE("task generation: determinism, structure, length bounds") {
    TaskGenConfig cfg;
    TaskSample a = generate_task(123, cfg);
    TaskSample b = generate_task(123, cfg);
    CHECK(a.tokens == b.tokens);
    CHECK(a.answer_begin == b.answer_begin);

    for (uint64_t seed = 0; seed < 50; ++seed) {
        TaskSample s = generate_task(seed, cfg);
        const int len = static_cast<int>(s.tokens.size());
        CHECK(len >= cfg.min_len);
        CHECK(len <= cfg.max_len);
        CHECK(s.answer_end == len);
        CHECK(s.answer_begin == len - 2);
        CHECK(s.context_len == len - 4);
        CHECK(s.tokens[static_cast<size_t>(s.context_len)] == cfg.query_marker);
        CHECK(s.tokens[static_cast<size_t>(s.context_len) + 1] == s.queried_key);

        // the answer value tokens appear verbatim earlier, right after their key
        const int v1 = s.tokens[static_cast<size_t>(s.answer_begin)];
        const int v2 = s.tokens[static_cast<size_t>(s.answer_begin) + 1];
        bool found = false;
        for (int i = 0; i + 3 < s.context_len; ++i) {
            if (s.tokens[static_cast<size_t>(i)] == cfg.record_marker &&
                s.tokens[static_cast<size_t>(i) + 1] == s.queried_key) {
                found = found || (s.tokens[static_cast<size_t>(i) + 2] == v1 &&
                                  s.tokens[static_cast<size_t>(i) + 3] == v2);
            }
        }
        CHECK(found);
    }
}

TEST_CASE("record depths are approximately uniform") {
    TaskGenConfig cfg;
    std::vector<int> bins(10, 0);
    int total = 0;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        TaskSample s = generate_task(seed, cfg);
        for (int i = 0; i + 3 < s.context_len; ++i) {
            if (s.tokens[static_cast<size_t>(i)] == cfg.record_marker) {
                // depth over the feasible start span; a 4-token block cannot
                // begin within 3 positions of the context end
                const double depth = static_cast<double>(i) / (s.context_len - 4);
                const int bin = std::min(9, static_cast<int>(depth * 10.0));
                ++bins[static_cast<size_t>(bin)];
                ++total;
            }
        }
    }
    const double expected = total / 10.0;
    double chi2 = 0.0;
    for (int c : bins) chi2 += (c - expected) * (c - expected) / expected;
    // chi-square critical value for 9 degrees of freedom at p = 0.01
    CHECK(chi2 < 21.666);
}

TEST_CASE("zero-step training is a no-op on the parameters") {
    ModelConfig cfg = tiny_config();
    ModelWeights teacher = init_model(cfg);
    teacher.frozen = true;
    LkvParams params = init_lkv_params(cfg, 41);
    std::vector<double> before(params.head_embeddings.data(),
                               params.head_embeddings.data() + params.head_embeddings.numel());
    TrainConfig tc;
    tc.total_steps = 0;
    tc.warmup_steps = 0;
    tc.tau_schedule.total_steps = 0;
    tc.ratio_schedule.total_steps = 0;
    TrainResult r = train(teacher, std::move(params), tc, tiny_task());
    CHECK(r.metrics.empty());
    for (size_t i = 0; i < r.params.head_embeddings.numel(); ++i) {
        CHECK(r.params.head_embeddings.data()[i] == before[i]);
    }
}

TEST_CASE("training requires a frozen teacher") {
    ModelConfig cfg = tiny_config();
    ModelWeights teacher = init_model(cfg);  // not frozen
    LkvParams params = init_lkv_params(cfg, 42);
    TrainConfig tc;
    tc.total_steps = 1;
    tc.warmup_steps = 0;
    tc.tau_schedule.total_steps = 1;
    tc.ratio_schedule.total_steps = 1;
    CHECK_THROWS_AS(train(teacher, std::move(params), tc, tiny_task()), contract_error);
}

TEST_CASE("short training run: frozen teacher, clipped gradients, tracked masks, determinism") {
    ModelConfig cfg = tiny_config();
    ModelWeights teacher = init_model(cfg);
    teacher.frozen = true;
    std::vector<double> teacher_before(teacher.tok_embed.data(),
                                       teacher.tok_embed.data() + teacher.tok_embed.numel());

    TrainConfig tc;
    tc.total_steps = 6;
    tc.warmup_steps = 2;
    tc.batch_size = 2;
    tc.n_threads = 2;
    tc.snapshot_every = 3;
    tc.tau_schedule.total_steps = 6;
    tc.ratio_schedule.total_steps = 6;

    TrainResult r1 = train(teacher, init_lkv_params(cfg, 43), tc, tiny_task());
    CHECK(static_cast<int>(r1.metrics.size()) == 6);
    for (const StepMetrics& m : r1.metrics) {
        CHECK(std::isfinite(m.loss));
        CHECK(m.grad_norm <= tc.grad_clip_norm + 1e-9);
        CHECK(m.mask_gap <= 1e-6);
    }
    CHECK_FALSE(r1.metrics[0].budget_snapshot.empty());
    CHECK(r1.metrics[1].budget_snapshot.empty());
    CHECK_FALSE(r1.metrics[3].budget_snapshot.empty());

    // the frozen backbone is bit-identical after training
    for (size_t i = 0; i < teacher.tok_embed.numel(); ++i) {
        CHECK(teacher.tok_embed.data()[i] == teacher_before[i]);
    }

    // identical seeds reproduce the metrics byte for byte
    TrainResult r2 = train(teacher, init_lkv_params(cfg, 43), tc, tiny_task());
    CHECK(metrics_to_jsonl(r1.metrics) == metrics_to_jsonl(r2.metrics));

    // a different thread count must not change the numbers either
    TrainConfig tc1 = tc;
    tc1.n_threads = 1;
    TrainResult r3 = train(teacher, init_lkv_params(cfg, 43), tc1, tiny_task());
    CHECK(metrics_to_jsonl(r1.metrics) == metrics_to_jsonl(r3.metrics));
}
