#include "gcd/common.hpp"

#include <cstdlib>
#include <thread>

namespace gcd {

std::size_t worker_threads() {
    std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("GCD_THREADS")) {
        char* end = nullptr;
        long cap = std::strtol(env, &end, 10);
        if (end == env || cap < 1) throw Error(Err::InvalidConfig, "bad GCD_THREADS value");
        n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    }
    return n;
}

void parallel_for(std::size_t begin, std::size_t end,
                  const std::function<void(std::size_t)>& body) {
    std::size_t n = end > begin ? end - begin : 0;
    std::size_t threads = std::min(worker_threads(), n);
    if (threads <= 1) {
        for (std::size_t i = begin; i < end; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t chunk = (n + threads - 1) / threads;
    for (std::size_t t = 0; t < threads; ++t) {
        std::size_t lo = begin + t * chunk;
        std::size_t hi = std::min(end, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &body] {
            for (std::size_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace gcd
