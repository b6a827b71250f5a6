#pragma once

#include <cstddef>
#include <functional>

namespace reltopo {

/// Worker count from RELTOPO_THREADS, else the hardware concurrency (>= 1).
std::size_t thread_count();

/// Runs fn(i) for i in [0, n) across thread_count() workers. Results must be
/// written to per-index slots; the first exception is rethrown after joining.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace reltopo
