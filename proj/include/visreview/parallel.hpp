#pragma once

#include <cstddef>
#include <functional>

namespace vr {

/// Worker count: HR_THREADS if set to a positive integer, otherwise the
/// hardware concurrency (at least 1).
std::size_t default_threads();

/// Runs body(i) for i in [0, n) on up to `threads` workers. Each index runs
/// exactly once; the first exception thrown is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body);

}  // namespace vr
