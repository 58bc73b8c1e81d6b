// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <future>
#include <vector>

namespace lkv {

// Runs fn(0..n-1), fanning out across up to n_threads async workers. Each
// index does independent work and writes only caller-owned slots, so results
// stay deterministic regardless of scheduling.
template <class Fn>
void parallel_for_index(int n, int n_threads, Fn&& fn) {
    if (n_threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    for (int base = 0; base < n; base += n_threads) {
        std::vector<std::future<void>> futs;
        const int hi = std::min(n, base + n_threads);
        futs.reserve(static_cast<size_t>(hi - base));
        for (int i = base; i < hi; ++i) {
            futs.push_back(std::async(std::launch::async, [&fn, i] { fn(i); }));
        }
        for (auto& f : futs) f.get();
    }
}

}  // namespace lkv
