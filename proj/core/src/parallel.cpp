#include "rqmoe/parallel.hpp"

#include <algorithm>
#include <exception>
#include <thread>
#include <vector>

namespace rqmoe {

std::size_t hardware_threads() {
    unsigned n = std::thread::hardware_concurrency();
    return n == 0 ? 1 : static_cast<std::size_t>(n);
}

std::size_t resolve_threads(std::size_t requested) {
    return requested == 0 ? hardware_threads() : requested;
}

void parallel_chunks(std::size_t n,
                     std::size_t workers,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    workers = std::max<std::size_t>(1, std::min(resolve_threads(workers), std::max<std::size_t>(n, 1)));
    if (n == 0) {
        return;
    }
    if (workers == 1) {
        fn(0, n, 0);
        return;
    }

    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    pool.reserve(workers - 1);

    auto run = [&](std::size_t w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) {
            return;
        }
        try {
            fn(begin, end, w);
        } catch (...) {
            errors[w] = std::current_exception();
        }
    };

    for (std::size_t w = 1; w < workers; ++w) {
        pool.emplace_back(run, w);
    }
    run(0);
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace rqmoe
