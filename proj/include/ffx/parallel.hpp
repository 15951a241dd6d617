#pragma once

#include <cstddef>
#include <functional>

namespace ffx {

// Worker count used by kernels that parallelize internally. Results never
// depend on this value: work is split into tasks that write disjoint output.
void set_num_threads(std::size_t n);
std::size_t num_threads();

// Runs fn(i) for i in [0, n). Tasks are distributed round-robin over at most
// num_threads() workers; the call returns after all tasks finish.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace ffx
