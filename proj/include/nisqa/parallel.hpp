#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace nisqa {

// Index-ordered parallel map: results land in caller-owned slots keyed by
// index, so thread scheduling never changes outputs.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    std::size_t nworkers = std::min(jobs, n);
    workers.reserve(nworkers);
    for (std::size_t w = 0; w < nworkers; ++w) {
        workers.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) return;
                fn(i);
            }
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace nisqa
