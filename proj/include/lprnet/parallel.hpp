#pragma once

#include <cstddef>
#include <functional>

namespace lprnet {

// Worker cap: LPRNET_THREADS if set, else hardware concurrency.
int max_threads();

// Runs fn(i) for i in [0, count). Tasks are split into contiguous ranges,
// one per worker; with one worker the loop runs inline. Each index is
// executed exactly once, so results do not depend on the worker count as
// long as distinct indices write distinct outputs.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

}  // namespace lprnet
