#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace sfp {

// Worker cap: SFP_THREADS env var, 0 or unset = hardware concurrency.
inline unsigned worker_count() {
    static unsigned n = [] {
        const char* env = std::getenv("SFP_THREADS");
        long v = env ? std::strtol(env, nullptr, 10) : 0;
        if (v <= 0) v = static_cast<long>(std::thread::hardware_concurrency());
        if (v <= 0) v = 1;
        return static_cast<unsigned>(v);
    }();
    return n;
}

// Runs fn(i) for i in [0, count). Each index is executed exactly once by one
// worker; fn must only write state owned by index i so results do not depend
// on the thread count.
inline void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn) {
    const unsigned workers = std::min<std::size_t>(worker_count(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < count; i += workers) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace sfp
