#pragma once

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace statewise {

// Runs fn(i) for i in [0, n) across up to `jobs` threads with a static block
// partition. Callers store results by index, so the output order never depends
// on scheduling. The first exception thrown by any worker is rethrown.
template <class Fn>
inline void parallel_for(int n, int jobs, Fn&& fn) {
    jobs = std::clamp(jobs, 1, std::max(1, n));
    if (jobs == 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(jobs));
    const int chunk = (n + jobs - 1) / jobs;
    for (int t = 0; t < jobs; ++t) {
        const int lo = t * chunk, hi = std::min(n, lo + chunk);
        pool.emplace_back([&, t, lo, hi] {
            try {
                for (int i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                errors[static_cast<size_t>(t)] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace statewise
