#pragma once

#include <cstddef>
#include <functional>

namespace rqmoe {

// Number of worker threads to use when the caller passes 0 (= auto).
std::size_t hardware_threads();
std::size_t resolve_threads(std::size_t requested);

// Splits [0, n) into at most `workers` contiguous chunks and runs
// fn(begin, end, worker_index) on each, one chunk per worker thread.
// The partition depends only on (n, workers), so any reduction that walks
// worker buffers in index order is deterministic for a fixed thread count.
// Exceptions thrown by workers are rethrown on the calling thread.
void parallel_chunks(std::size_t n,
                     std::size_t workers,
                     const std::function<void(std::size_t, std::size_t, std::size_t)>& fn);

}  // namespace rqmoe
