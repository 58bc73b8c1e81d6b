// SPDX-License-Identifier: Apache-2.0
//
// Single-file JSON run configuration. Every field has a default; unknown keys
// are rejected so config drift fails loudly. LKV_OUT_DIR, when set, replaces
// the default output root; command-line flags override both.

#pragma once

#include <string>

#include "lkv/distill.hpp"
#include "lkv/model.hpp"

namespace lkv {

struct TeacherConfig {
    int steps = 1500;
    int batch_size = 8;
    double lr = 1e-3;
    int warmup_steps = 50;
    uint64_t seed = 99;
    std::string path = "teacher.bin";
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    TaskGenConfig task;
    TeacherConfig teacher;
    std::string budget_policy = "learned";
    std::string select_policy = "learned";
    std::string out_dir = "out";
};

RunConfig default_run_config();

// Parses a config file; "" yields the defaults. Env overrides applied last.
RunConfig load_run_config(const std::string& path);

RunConfig run_config_from_json_text(const std::string& text);

// Canonical JSON rendering of a config (used by `lkv config --dump`).
std::string run_config_to_json_text(const RunConfig& config);

}  // namespace lkv
