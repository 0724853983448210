#pragma once

#include <cstddef>
#include <functional>

namespace nvmag {

/// Worker count: NV_THREADS when it holds a positive integer, otherwise the
/// number of hardware threads (at least 1).
std::size_t worker_count();

/// Runs body(i) for i in [0, n) on up to worker_count() threads using a static
/// contiguous partition. Results must not depend on which thread ran which
/// index; callers write into pre-sized per-index slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &body);

} // namespace nvmag
