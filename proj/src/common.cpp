#include "gpr/common.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

namespace gpr {

int thread_count() {
    static const int n = [] {
        if (const char* env = std::getenv("GPR_THREADS")) {
            const int v = std::atoi(env);
            if (v > 0) return v;
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return hw > 0 ? static_cast<int>(hw) : 1;
    }();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& chunk_body) {
    if (n <= 0) return;
    const int threads = std::min<int64_t>(thread_count(), n);
    if (threads <= 1) {
        chunk_body(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(threads));
    const int64_t chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int64_t lo = t * chunk;
        const int64_t hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&chunk_body, lo, hi] { chunk_body(lo, hi); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace gpr
