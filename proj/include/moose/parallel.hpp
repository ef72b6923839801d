#pragma once

#include <cstddef>
#include <functional>

namespace moose {

// Worker cap: MOOSE_NUM_WORKERS if set (>= 1), else hardware concurrency.
int worker_count();
void set_worker_count(int workers);

// Runs fn(i) for i in [0, n) on up to worker_count() threads. Each index is
// processed exactly once; callers write results to per-index slots so the
// outcome does not depend on scheduling. The first exception is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace moose
