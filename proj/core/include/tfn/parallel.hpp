#pragma once

#include <cstddef>
#include <functional>

namespace tfn {

// Worker count used by parallel_for. Initialized from TFN_THREADS when set,
// otherwise from the hardware concurrency.
std::size_t num_threads();
void set_num_threads(std::size_t count);

/// Splits [0, count) into contiguous chunks, one per worker, and runs
/// body(begin, end, worker) on each. The partition depends only on count and
/// the worker count, so per-worker reductions combined in worker order are
/// deterministic. Nested calls run inline on the calling thread.
void parallel_for(std::size_t count,
                  const std::function<void(std::size_t, std::size_t, std::size_t)>& body);

}  // namespace tfn
