#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <span>
#include <thread>
#include <vector>

namespace delayctl {

/// Worker count used by parallel loops. Results never depend on it: every
/// parallel loop writes disjoint outputs and all reductions are serial.
inline std::atomic<unsigned>& worker_count() {
    static std::atomic<unsigned> n{1};
    return n;
}

inline void set_threads(unsigned n) { worker_count().store(std::max(1u, n)); }

template <class F>
void parallel_for(std::size_t n, F&& body, std::size_t grain = 256) {
    const unsigned workers = worker_count().load();
    if (workers <= 1 || n < 2 * grain) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(workers, (n + grain - 1) / grain);
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t lo = n * c / chunks;
        const std::size_t hi = n * (c + 1) / chunks;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& t : pool) t.join();
}

/// Calls body(lo, hi) on disjoint index ranges covering [0, n).
template <class F>
void parallel_chunks(std::size_t n, F&& body, std::size_t grain = 256) {
    const unsigned workers = worker_count().load();
    if (workers <= 1 || n < 2 * grain) {
        if (n > 0) body(std::size_t{0}, n);
        return;
    }
    const std::size_t chunks = std::min<std::size_t>(workers, (n + grain - 1) / grain);
    std::vector<std::thread> pool;
    pool.reserve(chunks);
    for (std::size_t c = 0; c < chunks; ++c)
        pool.emplace_back([lo = n * c / chunks, hi = n * (c + 1) / chunks, &body] { body(lo, hi); });
    for (auto& t : pool) t.join();
}

/// Fixed-order pairwise summation.
inline double pairwise_sum(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n <= 16) {
        double s = 0.0;
        for (double v : x) s += v;
        return s;
    }
    const std::size_t h = n / 2;
    return pairwise_sum(x.subspan(0, h)) + pairwise_sum(x.subspan(h));
}

inline double mean(std::span<const double> x) {
    return x.empty() ? 0.0 : pairwise_sum(x) / static_cast<double>(x.size());
}

inline double standard_error(std::span<const double> x) {
    const std::size_t n = x.size();
    if (n < 2) return 0.0;
    const double m = mean(x);
    std::vector<double> sq(n);
    for (std::size_t i = 0; i < n; ++i) sq[i] = (x[i] - m) * (x[i] - m);
    return std::sqrt(pairwise_sum(sq) / static_cast<double>(n - 1) / static_cast<double>(n));
}

}  // namespace delayctl
