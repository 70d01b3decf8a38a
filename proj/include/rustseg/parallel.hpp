#pragma once

#include <algorithm>
#include <thread>
#include <vector>

namespace rustseg {

/// Run body(begin, end) over [0, n) split into contiguous chunks. Each index is
/// processed by exactly one call, so per-element results do not depend on the
/// thread count.
template <class Body>
void parallel_for(int n, int threads, Body&& body) {
    threads = std::clamp(threads, 1, std::max(1, n));
    if (threads == 1) {
        body(0, n);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    const int chunk = (n + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const int b = t * chunk;
        const int e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&body, b, e] { body(b, e); });
    }
}

}  // namespace rustseg
