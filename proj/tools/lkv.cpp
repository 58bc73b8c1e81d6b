// SPDX-License-Identifier: Apache-2.0
//
// Command-line entry point: gradient verification, teacher pretraining,
// policy distillation, budget export, eviction simulation and storage
// arithmetic. Exit codes: 0 success, 1 verification failure, 2 usage or
// config error, 3 numeric abort.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "lkv/checkpoint.hpp"
#include "lkv/distill.hpp"
#include "lkv/errors.hpp"
#include "lkv/evictsim.hpp"
#include "lkv/gradcheck.hpp"
#include "lkv/model.hpp"
#include "lkv/policy.hpp"
#include "lkv/rng.hpp"
#include "lkv/run_config.hpp"

namespace fs = std::filesystem;
using namespace lkv;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string out_dir;
    int64_t seed = -1;
    int steps = -1;
    double ratio = -1.0;
};

RunConfig effective_config(const CommonFlags& flags) {
    RunConfig cfg = load_run_config(flags.config_path);
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    if (flags.seed >= 0) {
        cfg.train.seed = static_cast<uint64_t>(flags.seed);
        cfg.teacher.seed = static_cast<uint64_t>(flags.seed);
        cfg.model.rng_seed = static_cast<uint64_t>(flags.seed);
    }
    if (flags.steps >= 0) {
        cfg.train.total_steps = flags.steps;
        cfg.train.tau_schedule.total_steps = flags.steps;
        cfg.train.ratio_schedule.total_steps = flags.steps;
        cfg.train.warmup_steps = std::min(cfg.train.warmup_steps, flags.steps);
        cfg.teacher.steps = flags.steps;
    }
    if (flags.ratio > 0.0) cfg.train.ratio_schedule.v_final = flags.ratio;
    return cfg;
}

std::string teacher_path(const RunConfig& cfg) {
    fs::path p(cfg.teacher.path);
    if (p.is_absolute()) return p.string();
    return (fs::path(cfg.out_dir) / p).string();
}

void write_file(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw contract_error("cannot write " + path);
    os << text;
}

std::function<LmSample(uint64_t)> task_stream(const TaskGenConfig& task, uint64_t seed) {
    return [task, seed](uint64_t idx) {
        TaskSample s = generate_task(derive_seed(seed, idx), task);
        return LmSample{std::move(s.tokens), s.answer_begin, s.answer_end};
    };
}

ModelWeights pretrain(const RunConfig& cfg) {
    ModelWeights w = init_model(cfg.model);
    PretrainConfig pc;
    pc.steps = cfg.teacher.steps;
    pc.batch_size = cfg.teacher.batch_size;
    pc.lr = cfg.teacher.lr;
    pc.warmup_steps = cfg.teacher.warmup_steps;
    pc.seed = cfg.teacher.seed;
    pc.n_threads = cfg.train.n_threads;
    std::vector<double> losses;
    ModelWeights trained = pretrain_teacher(std::move(w), task_stream(cfg.task, cfg.teacher.seed), pc, &losses);
    if (!losses.empty()) {
        std::printf("pretrain: %d steps, first loss %.4f, last loss %.4f\n", pc.steps, losses.front(),
                    losses.back());
    }
    return trained;
}

int cmd_gradcheck(const std::string& scope) {
    std::vector<GradCheckReport> reports;
    if (scope == "soft_topk" || scope == "all") reports.push_back(gradcheck_soft_topk(2026, 40));
    if (scope == "attention" || scope == "all") reports.push_back(gradcheck_attention(2027, 25));
    if (scope == "policy" || scope == "all") reports.push_back(gradcheck_policy(2028, 10));
    bool all_pass = true;
    for (const GradCheckReport& r : reports) {
        std::printf("%-10s cases=%-3d max_rel_err=%.3e tol=%.0e %s\n", r.scope.c_str(), r.cases,
                    r.max_rel_err, r.tolerance, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

int cmd_pretrain(const CommonFlags& flags) {
    RunConfig cfg = effective_config(flags);
    fs::create_directories(cfg.out_dir);
    ModelWeights teacher = pretrain(cfg);
    save_model(teacher_path(cfg), teacher);
    std::printf("teacher checkpoint: %s\n", teacher_path(cfg).c_str());
    return 0;
}

int cmd_train(const CommonFlags& flags, bool do_pretrain) {
    RunConfig cfg = effective_config(flags);
    fs::create_directories(cfg.out_dir);

    ModelWeights teacher;
    const std::string tpath = teacher_path(cfg);
    if (fs::exists(tpath)) {
        teacher = load_model(tpath);
        teacher.frozen = true;
    } else if (do_pretrain) {
        teacher = pretrain(cfg);
        save_model(tpath, teacher);
    } else {
        std::fprintf(stderr, "no teacher checkpoint at %s (run pretrain-teacher or pass --pretrain)\n",
                     tpath.c_str());
        return 2;
    }

    LkvParams params = init_lkv_params(cfg.model, derive_seed(cfg.train.seed, 0xbeef));
    TrainResult result = train(teacher, std::move(params), cfg.train, cfg.task);

    save_lkv_params((fs::path(cfg.out_dir) / "lkv_params.bin").string(), result.params);
    write_file((fs::path(cfg.out_dir) / "metrics.jsonl").string(), metrics_to_jsonl(result.metrics));
    {
        NoGradGuard ng;
        BudgetTable table = allocate_budgets(head_scores(result.params), cfg.train.ratio_schedule.v_final,
                                             cfg.model.n_layers, cfg.model.n_kv_heads);
        write_file((fs::path(cfg.out_dir) / "budgets.csv").string(), budget_table_csv(table));
    }
    if (!result.metrics.empty()) {
        std::printf("train: %zu steps, first loss %.5f, last loss %.5f\n", result.metrics.size(),
                    result.metrics.front().loss, result.metrics.back().loss);
    }
    std::printf("artifacts in %s: lkv_params.bin metrics.jsonl budgets.csv\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_export_budgets(const CommonFlags& flags, const std::string& checkpoint, double ratio, int t) {
    RunConfig cfg = effective_config(flags);
    fs::create_directories(cfg.out_dir);
    LkvParams params = load_lkv_params(checkpoint);
    NoGradGuard ng;
    BudgetTable table = allocate_budgets(head_scores(params), ratio, params.n_layers, params.n_kv_heads);
    write_file((fs::path(cfg.out_dir) / "budgets.csv").string(), budget_table_csv(table));
    std::printf("wrote %s/budgets.csv\n", cfg.out_dir.c_str());
    if (t > 0) {
        std::vector<int> budgets = freeze_budgets(table, t);
        std::string csv = "layer,head,budget\n";
        char buf[64];
        for (int l = 0; l < table.n_layers; ++l) {
            for (int h = 0; h < table.n_kv_heads; ++h) {
                std::snprintf(buf, sizeof buf, "%d,%d,%d\n", l, h,
                              budgets[static_cast<size_t>(l * table.n_kv_heads + h)]);
                csv += buf;
            }
        }
        write_file((fs::path(cfg.out_dir) / "budgets_int.csv").string(), csv);
        std::printf("wrote %s/budgets_int.csv (t=%d)\n", cfg.out_dir.c_str(), t);
    }
    return 0;
}

void print_mem_line(const MemoryModel& mm, double ratio) {
    MemoryReport r = kv_memory_bytes(mm, ratio);
    std::printf("tokens=%lld retention=%.2f full=%.2f GB compressed=%.2f GB reduction=%.2fx\n",
                static_cast<long long>(mm.tokens), ratio, r.full_bytes / 1e9, r.compressed_bytes / 1e9,
                r.reduction_factor);
}

int cmd_mem(int layers, int kv_heads, int head_dim, double bytes, int64_t tokens, double ratio) {
    MemoryModel mm;
    mm.n_layers = layers;
    mm.n_kv_heads = kv_heads;
    mm.head_dim = head_dim;
    mm.bytes_per_element = bytes;
    mm.tokens = tokens;
    print_mem_line(mm, 1.0);
    if (ratio < 1.0) print_mem_line(mm, ratio);
    return 0;
}

std::vector<EvictionPolicy> parse_grid(const std::string& grid_spec, const LkvParams* params) {
    std::vector<EvictionPolicy> grid;
    std::stringstream ss(grid_spec);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        const auto colon = cell.find(':');
        if (colon == std::string::npos) throw contract_error("grid cells look like budget:select");
        EvictionPolicy p;
        p.budget = budget_kind_from_string(cell.substr(0, colon));
        p.select = select_kind_from_string(cell.substr(colon + 1));
        p.params = params;
        grid.push_back(p);
    }
    if (grid.empty()) throw contract_error("empty grid");
    return grid;
}

int cmd_simulate(const CommonFlags& flags, const std::string& checkpoint, const std::string& grid_spec,
                 const std::string& ratios_spec, int samples, bool mem_only) {
    RunConfig cfg = effective_config(flags);

    std::vector<double> ratios;
    {
        std::stringstream ss(ratios_spec);
        std::string item;
        while (std::getline(ss, item, ',')) ratios.push_back(std::stod(item));
        if (ratios.empty()) throw contract_error("no ratios given");
    }

    if (mem_only) {
        MemoryModel mm;  // 8B-class geometry
        for (double r : ratios) print_mem_line(mm, std::min(r, 1.0));
        return 0;
    }

    fs::create_directories(cfg.out_dir);
    const std::string tpath = teacher_path(cfg);
    if (!fs::exists(tpath)) {
        std::fprintf(stderr, "no teacher checkpoint at %s\n", tpath.c_str());
        return 2;
    }
    ModelWeights teacher = load_model(tpath);
    teacher.frozen = true;

    LkvParams params;
    const bool needs_params = grid_spec.find("learned") != std::string::npos;
    if (needs_params) {
        if (checkpoint.empty()) {
            std::fprintf(stderr, "grid contains learned cells; pass --checkpoint\n");
            return 2;
        }
        params = load_lkv_params(checkpoint);
    }
    std::vector<EvictionPolicy> grid = parse_grid(grid_spec, needs_params ? &params : nullptr);

    const uint64_t seed = flags.seed >= 0 ? static_cast<uint64_t>(flags.seed) : cfg.train.seed;
    std::vector<SimReport> reports = compare_policies(teacher, grid, ratios, samples, seed, cfg.task);
    write_file((fs::path(cfg.out_dir) / "grid.csv").string(), reports_csv(reports));
    write_file((fs::path(cfg.out_dir) / "grid.json").string(), reports_json(reports));
    std::printf("%-14s %-12s %6s %9s %12s %10s\n", "budget", "select", "R", "accuracy", "mean_kl",
                "reduction");
    for (const SimReport& r : reports) {
        std::printf("%-14s %-12s %6.2f %9.4f %12.6f %9.2fx\n", r.budget_policy.c_str(),
                    r.select_policy.c_str(), r.retention_ratio, r.accuracy, r.mean_answer_kl, r.reduction);
    }
    std::printf("reports in %s: grid.csv grid.json\n", cfg.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"learned KV-cache eviction workbench"};
    app.require_subcommand(1);

    CommonFlags flags;
    app.add_option("--config", flags.config_path, "JSON config file")->capture_default_str();
    app.add_option("--out", flags.out_dir, "output directory (overrides config/out_dir and LKV_OUT_DIR)");
    app.add_option("--seed", flags.seed, "seed override");
    app.add_option("--steps", flags.steps, "step-count override");
    app.add_option("--ratio", flags.ratio, "retention-ratio override");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference verification suites");
    std::string scope = "all";
    gradcheck->add_option("scope", scope, "soft_topk | attention | policy | all")
        ->check(CLI::IsMember({"soft_topk", "attention", "policy", "all"}));

    auto* pretrain_cmd = app.add_subcommand("pretrain-teacher", "train and freeze the toy teacher");

    auto* train_cmd = app.add_subcommand("train", "distill the eviction policy against a frozen teacher");
    bool do_pretrain = false;
    train_cmd->add_flag("--pretrain", do_pretrain, "pretrain the teacher first when no checkpoint exists");

    auto* export_cmd = app.add_subcommand("export-budgets", "emit the frozen budget table as CSV");
    std::string checkpoint;
    double export_ratio = 0.15;
    int export_t = 0;
    export_cmd->add_option("--checkpoint", checkpoint, "policy checkpoint")->required();
    export_cmd->add_option("--budget-ratio", export_ratio, "target retention ratio");
    export_cmd->add_option("--t", export_t, "context length for integer budgets");

    auto* sim_cmd = app.add_subcommand("simulate", "policy comparison grid over needle tasks");
    std::string sim_checkpoint;
    std::string grid_spec = "learned:learned,learned:recency,uniform:recency,uniform:random,pyramid:recency";
    std::string ratios_spec = "0.15";
    int samples = 50;
    bool mem_only = false;
    sim_cmd->add_option("--checkpoint", sim_checkpoint, "policy checkpoint for learned cells");
    sim_cmd->add_option("--grid", grid_spec, "comma list of budget:select cells");
    sim_cmd->add_option("--ratios", ratios_spec, "comma list of retention ratios");
    sim_cmd->add_option("--samples", samples, "needle samples per cell");
    sim_cmd->add_flag("--mem-only", mem_only, "print storage arithmetic only");

    auto* mem_cmd = app.add_subcommand("mem", "KV storage arithmetic");
    int mem_layers = 32, mem_kv_heads = 8, mem_head_dim = 128;
    double mem_bytes = 2.0, mem_ratio = 0.15;
    int64_t mem_tokens = 200000;
    mem_cmd->add_option("--layers", mem_layers, "transformer layers");
    mem_cmd->add_option("--kv-heads", mem_kv_heads, "KV heads per layer");
    mem_cmd->add_option("--head-dim", mem_head_dim, "head width");
    mem_cmd->add_option("--bytes", mem_bytes, "bytes per element");
    mem_cmd->add_option("--tokens", mem_tokens, "context length");
    mem_cmd->add_option("--mem-ratio", mem_ratio, "retention ratio");

    auto* config_cmd = app.add_subcommand("config", "print the effective configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gradcheck->parsed()) return cmd_gradcheck(scope);
        if (pretrain_cmd->parsed()) return cmd_pretrain(flags);
        if (train_cmd->parsed()) return cmd_train(flags, do_pretrain);
        if (export_cmd->parsed()) {
            const double r = flags.ratio > 0.0 ? flags.ratio : export_ratio;
            return cmd_export_budgets(flags, checkpoint, r, export_t);
        }
        if (sim_cmd->parsed()) {
            const std::string ratios = flags.ratio > 0.0 ? std::to_string(flags.ratio) : ratios_spec;
            return cmd_simulate(flags, sim_checkpoint, grid_spec, ratios, samples, mem_only);
        }
        if (mem_cmd->parsed()) {
            const double r = flags.ratio > 0.0 ? flags.ratio : mem_ratio;
            return cmd_mem(mem_layers, mem_kv_heads, mem_head_dim, mem_bytes, mem_tokens, r);
        }
        if (config_cmd->parsed()) {
            std::fputs(run_config_to_json_text(effective_config(flags)).c_str(), stdout);
            return 0;
        }
    } catch (const budget_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const contract_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::runtime_error& e) {
        // numeric_error, overflow_guard_error, degenerate_mask_error
        std::fprintf(stderr, "numeric abort: %s\n", e.what());
        return 3;
    }
    return 2;
}
