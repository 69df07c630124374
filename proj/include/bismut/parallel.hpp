#pragma once

// Path-level parallelism with results independent of the worker count.
// Work is cut into chunks of fixed size; each chunk writes only its own slot
// and callers reduce the slots in chunk order.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

namespace bismut {

inline std::atomic<int>& worker_count_setting() {
    static std::atomic<int> count{1};
    return count;
}

/// Number of worker threads used by path loops (performance only).
inline void set_worker_count(int n) { worker_count_setting().store(std::max(1, n)); }
inline int worker_count() { return worker_count_setting().load(); }

inline constexpr std::int64_t kPathChunk = 1024;

/// Calls body(chunk_index, begin, end) for every chunk of [0, total).
template <class Body>
void for_each_chunk(std::int64_t total, Body&& body, std::int64_t chunk = kPathChunk) {
    const std::int64_t chunks = (total + chunk - 1) / chunk;
    const int workers = static_cast<int>(std::min<std::int64_t>(worker_count(), chunks));
    auto run = [&](std::int64_t c) { body(c, c * chunk, std::min(total, (c + 1) * chunk)); };
    if (workers <= 1) {
        for (std::int64_t c = 0; c < chunks; ++c) run(c);
        return;
    }
    std::atomic<std::int64_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::int64_t c = next++; c < chunks; c = next++) {
                try {
                    run(c);
                } catch (...) {
                    std::lock_guard lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// Map-reduce over paths: each chunk folds into its own accumulator, then
/// accumulators merge left to right.
template <class Acc, class PerPath>
Acc reduce_paths(std::int64_t total, PerPath&& per_path, std::int64_t chunk = kPathChunk) {
    const std::int64_t chunks = (total + chunk - 1) / chunk;
    std::vector<Acc> slots(static_cast<std::size_t>(chunks));
    for_each_chunk(
        total,
        [&](std::int64_t c, std::int64_t begin, std::int64_t end) {
            for (std::int64_t p = begin; p < end; ++p) per_path(slots[static_cast<std::size_t>(c)], p);
        },
        chunk);
    Acc out{};
    for (const auto& s : slots) out.merge(s);
    return out;
}

/// splitmix64 finaliser; spreads structured keys over the seed space.
inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Independent stream for one path, derived from (seed, path index, stream tag).
inline std::mt19937_64 path_engine(std::uint64_t seed, std::uint64_t path, std::uint64_t stream = 0) {
    return std::mt19937_64(mix64(mix64(mix64(seed) ^ path) ^ (stream * 0x632be59bd9b4e019ULL)));
}

}  // namespace bismut
