// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lkv {

// A caller broke an API precondition (bad shape, non-scalar backward root, ...).
struct contract_error : std::runtime_error {
    explicit contract_error(const std::string& msg) : std::runtime_error("contract: " + msg) {}
};

// Non-finite values entered or left a numeric routine.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error("numeric: " + msg) {}
};

// A requested budget lies outside its legal domain.
struct budget_error : std::runtime_error {
    explicit budget_error(const std::string& msg) : std::runtime_error("budget: " + msg) {}
};

// Score spread too extreme for the float64 exponential range.
struct overflow_guard_error : std::runtime_error {
    explicit overflow_guard_error(const std::string& msg) : std::runtime_error("overflow guard: " + msg) {}
};

// A soft mask wiped out every admissible attention position in some row.
struct degenerate_mask_error : std::runtime_error {
    explicit degenerate_mask_error(const std::string& msg) : std::runtime_error("degenerate mask: " + msg) {}
};

}  // namespace lkv
