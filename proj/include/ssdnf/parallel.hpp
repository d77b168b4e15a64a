#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace ssdnf {

// Worker count: SSDNF_THREADS env var wins, otherwise hardware concurrency.
inline int worker_count() {
    if (const char* env = std::getenv("SSDNF_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

// Runs fn(i) for i in [0, n). Each index must write only its own outputs;
// chunk boundaries are deterministic so results never depend on the worker
// count.
template <class Fn>
void parallel_for(int64_t n, Fn&& fn, int max_workers = -1) {
    int workers = max_workers > 0 ? std::min(max_workers, worker_count()) : worker_count();
    if (workers <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = int(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers));
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
        int64_t lo = w * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

} // namespace ssdnf
