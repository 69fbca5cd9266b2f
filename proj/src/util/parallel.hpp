#pragma once

#include <cstddef>
#include <functional>

namespace comcat {

// Worker count from COMCAT_THREADS, defaulting to the hardware concurrency.
std::size_t worker_count();

// Runs fn(worker, begin, end) over contiguous chunks of [0, n). Chunk
// boundaries depend only on n and the worker count; callers that need
// thread-count-independent results must reduce per-item outputs in index
// order afterwards.
void parallel_chunks(std::size_t n,
                     const std::function<void(std::size_t worker, std::size_t begin,
                                              std::size_t end)>& fn);

}  // namespace comcat
