// SPDX-License-Identifier: Apache-2.0

#include "lkv/run_config.hpp"

#include <json.hpp>

#include <cstdlib>
#include <fstream>
#include <set>

#include "lkv/errors.hpp"

namespace lkv {

namespace {

using ordered_json = nlohmann::ordered_json;

void reject_unknown(const ordered_json& obj, const std::set<std::string>& known, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (!known.count(it.key())) throw contract_error("config: unknown key '" + it.key() + "' in " + where);
    }
}

template <class T>
void read_field(const ordered_json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj[key].get<T>();
}

void parse_model(const ordered_json& j, ModelConfig& m) {
    reject_unknown(j, {"n_layers", "n_query_heads", "n_kv_heads", "head_dim", "vocab_size",
                       "max_seq_len", "rng_seed", "mlp_hidden"},
                   "model");
    read_field(j, "n_layers", m.n_layers);
    read_field(j, "n_query_heads", m.n_query_heads);
    read_field(j, "n_kv_heads", m.n_kv_heads);
    read_field(j, "head_dim", m.head_dim);
    read_field(j, "vocab_size", m.vocab_size);
    read_field(j, "max_seq_len", m.max_seq_len);
    read_field(j, "rng_seed", m.rng_seed);
    read_field(j, "mlp_hidden", m.mlp_hidden);
    m.validate();
}

void parse_train(const ordered_json& j, TrainConfig& t) {
    reject_unknown(j, {"beta", "tau_init", "tau_final", "ratio_init", "ratio_final", "lr_peak",
                       "lr_end", "warmup_steps", "total_steps", "batch_size", "grad_clip_norm",
                       "seed", "snapshot_every", "n_threads"},
                   "train");
    read_field(j, "beta", t.beta);
    read_field(j, "tau_init", t.tau_schedule.v_init);
    read_field(j, "tau_final", t.tau_schedule.v_final);
    read_field(j, "ratio_init", t.ratio_schedule.v_init);
    read_field(j, "ratio_final", t.ratio_schedule.v_final);
    read_field(j, "lr_peak", t.lr_peak);
    read_field(j, "lr_end", t.lr_end);
    read_field(j, "warmup_steps", t.warmup_steps);
    read_field(j, "total_steps", t.total_steps);
    read_field(j, "batch_size", t.batch_size);
    read_field(j, "grad_clip_norm", t.grad_clip_norm);
    read_field(j, "seed", t.seed);
    read_field(j, "snapshot_every", t.snapshot_every);
    read_field(j, "n_threads", t.n_threads);
    t.tau_schedule.total_steps = t.total_steps;
    t.ratio_schedule.total_steps = t.total_steps;
    t.validate();
}

void parse_task(const ordered_json& j, TaskGenConfig& t) {
    reject_unknown(j, {"min_len", "max_len", "n_records"}, "task");
    read_field(j, "min_len", t.min_len);
    read_field(j, "max_len", t.max_len);
    read_field(j, "n_records", t.n_records);
    t.validate();
}

void parse_teacher(const ordered_json& j, TeacherConfig& t) {
    reject_unknown(j, {"steps", "batch_size", "lr", "warmup_steps", "seed", "path"}, "teacher");
    read_field(j, "steps", t.steps);
    read_field(j, "batch_size", t.batch_size);
    read_field(j, "lr", t.lr);
    read_field(j, "warmup_steps", t.warmup_steps);
    read_field(j, "seed", t.seed);
    read_field(j, "path", t.path);
}

void parse_policy(const ordered_json& j, RunConfig& c) {
    reject_unknown(j, {"budget", "select"}, "policy");
    read_field(j, "budget", c.budget_policy);
    read_field(j, "select", c.select_policy);
}

}  // namespace

RunConfig default_run_config() {
    RunConfig c;
    c.train.tau_schedule.total_steps = c.train.total_steps;
    c.train.ratio_schedule.total_steps = c.train.total_steps;
    return c;
}

RunConfig run_config_from_json_text(const std::string& text) {
    ordered_json j = ordered_json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded() || !j.is_object()) throw contract_error("config: top level must be a JSON object");
    reject_unknown(j, {"model", "train", "task", "teacher", "policy", "out_dir"}, "top level");
    RunConfig c = default_run_config();
    if (j.contains("model")) parse_model(j["model"], c.model);
    if (j.contains("train")) parse_train(j["train"], c.train);
    if (j.contains("task")) parse_task(j["task"], c.task);
    if (j.contains("teacher")) parse_teacher(j["teacher"], c.teacher);
    if (j.contains("policy")) parse_policy(j["policy"], c);
    read_field(j, "out_dir", c.out_dir);
    return c;
}

RunConfig load_run_config(const std::string& path) {
    RunConfig c;
    if (path.empty()) {
        c = default_run_config();
    } else {
        std::ifstream is(path);
        if (!is) throw contract_error("config: cannot open " + path);
        std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        c = run_config_from_json_text(text);
    }
    if (const char* env = std::getenv("LKV_OUT_DIR")) {
        if (env[0] != '\0') c.out_dir = env;
    }
    return c;
}

std::string run_config_to_json_text(const RunConfig& c) {
    ordered_json j;
    j["model"] = {{"n_layers", c.model.n_layers},
                  {"n_query_heads", c.model.n_query_heads},
                  {"n_kv_heads", c.model.n_kv_heads},
                  {"head_dim", c.model.head_dim},
                  {"vocab_size", c.model.vocab_size},
                  {"max_seq_len", c.model.max_seq_len},
                  {"rng_seed", c.model.rng_seed},
                  {"mlp_hidden", c.model.mlp_hidden}};
    j["train"] = {{"beta", c.train.beta},
                  {"tau_init", c.train.tau_schedule.v_init},
                  {"tau_final", c.train.tau_schedule.v_final},
                  {"ratio_init", c.train.ratio_schedule.v_init},
                  {"ratio_final", c.train.ratio_schedule.v_final},
                  {"lr_peak", c.train.lr_peak},
                  {"lr_end", c.train.lr_end},
                  {"warmup_steps", c.train.warmup_steps},
                  {"total_steps", c.train.total_steps},
                  {"batch_size", c.train.batch_size},
                  {"grad_clip_norm", c.train.grad_clip_norm},
                  {"seed", c.train.seed},
                  {"snapshot_every", c.train.snapshot_every},
                  {"n_threads", c.train.n_threads}};
    j["task"] = {{"min_len", c.task.min_len}, {"max_len", c.task.max_len}, {"n_records", c.task.n_records}};
    j["teacher"] = {{"steps", c.teacher.steps},
                    {"batch_size", c.teacher.batch_size},
                    {"lr", c.teacher.lr},
                    {"warmup_steps", c.teacher.warmup_steps},
                    {"seed", c.teacher.seed},
                    {"path", c.teacher.path}};
    j["policy"] = {{"budget", c.budget_policy}, {"select", c.select_policy}};
    j["out_dir"] = c.out_dir;
    return j.dump(2) + "\n";
}

}  // namespace lkv
