#pragma once

#include <cstddef>
#include <functional>

namespace pacbus {

/// Worker cap: PACBUS_THREADS when set (>= 1), otherwise the hardware count.
std::size_t worker_count();

/// Runs fn(i) for i in [0, n) across workers. Each index writes only its own
/// slots, so results are identical for any worker count; reductions happen in
/// index order on the caller's side.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace pacbus
