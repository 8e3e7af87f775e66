// Minimal worker sharding. Work is split into `workers` fixed shards and any
// cross-shard reduction happens on the calling thread in shard-index order,
// so results depend on the shard count but never on scheduling. workers == 1
// runs inline (the fully single-threaded mode used for bit-exact runs).
#pragma once

#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace sicql {

inline void parallel_shards(int workers, const std::function<void(int)>& fn) {
    if (workers <= 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    threads.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            try {
                fn(w);
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

// Contiguous [begin, end) shard of n items for shard w of `workers`.
inline std::pair<int64_t, int64_t> shard_range(int64_t n, int workers, int w) {
    const int64_t base = n / workers;
    const int64_t rem = n % workers;
    const int64_t begin = w * base + std::min<int64_t>(w, rem);
    const int64_t size = base + (w < rem ? 1 : 0);
    return {begin, begin + size};
}

}  // namespace sicql
