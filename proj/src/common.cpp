// SPDX-License-Identifier: Apache-2.0
#include "t4dg/common.hpp"

#include <algorithm>

namespace t4dg {

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    const int workers = worker_count();
    if (workers <= 1 || n < 2) {
        body(0, n);
        return;
    }
    const int64_t chunks = std::min<int64_t>(workers, n);
    const int64_t per = (n + chunks - 1) / chunks;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(chunks));
    for (int64_t c = 0; c < chunks; ++c) {
        const int64_t lo = c * per;
        const int64_t hi = std::min(n, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    for (auto& t : pool) t.join();
}

} // namespace t4dg
