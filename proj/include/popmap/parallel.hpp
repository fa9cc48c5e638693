#pragma once

// Chunked fan-out with results that never depend on the worker count.
//
// Work is cut into fixed-size chunks whose boundaries depend only on the
// problem size. Workers pull chunk indices from a shared counter; callers
// store per-chunk partials and reduce them in chunk order afterwards.

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace popmap {

namespace detail {
inline std::atomic<std::size_t>& thread_setting() {
    static std::atomic<std::size_t> n{0};
    return n;
}
} // namespace detail

inline std::size_t default_thread_count() {
    if (const char* env = std::getenv("POPMAP_THREADS")) {
        long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

inline std::size_t thread_count() {
    std::size_t n = detail::thread_setting().load();
    return n == 0 ? default_thread_count() : n;
}

inline void set_thread_count(std::size_t n) { detail::thread_setting().store(n); }

inline std::size_t chunk_count(std::size_t n, std::size_t chunk) {
    return (n + chunk - 1) / chunk;
}

// Calls fn(chunk_index, begin, end) for every chunk of [0, n).
template <class Fn>
void parallel_chunks(std::size_t n, std::size_t chunk, Fn&& fn) {
    const std::size_t chunks = chunk_count(n, chunk);
    const std::size_t workers = std::min(thread_count(), chunks);
    auto run_one = [&](std::size_t c) {
        fn(c, c * chunk, std::min(n, (c + 1) * chunk));
    };
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) run_one(c);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            std::size_t c = next.fetch_add(1);
            if (c >= chunks) return;
            try {
                run_one(c);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

} // namespace popmap
