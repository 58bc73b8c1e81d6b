// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference verification suites behind the `gradcheck` command.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lkv {

struct GradCheckReport {
    std::string scope;
    double max_rel_err = 0.0;
    double tolerance = 1e-5;
    int cases = 0;
    bool pass = false;
};

GradCheckReport gradcheck_soft_topk(uint64_t seed, int n_cases);
GradCheckReport gradcheck_attention(uint64_t seed, int n_cases);
GradCheckReport gradcheck_policy(uint64_t seed, int n_cases);

}  // namespace lkv
