#pragma once
// Index-based work partitioning. Callers must write results into slots keyed
// by the work index so output is identical for any thread count.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace spikelab {

inline void parallel_for(int64_t n, int jobs, const std::function<void(int64_t)>& fn) {
    if (n <= 0) return;
    const int64_t workers = std::max<int64_t>(1, std::min<int64_t>(jobs, n));
    if (workers == 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int64_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const int64_t i = next.fetch_add(1, std::memory_order_relaxed);
                if (i >= n) return;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!err) err = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace spikelab
