#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "ffx/ops.hpp"
#include "ffx/tensor.hpp"

namespace ffx {

// Rows grouped by the matrix they select. order[offsets[e]..offsets[e+1])
// are the rows routed to matrix e, in their original relative order.
struct RoutingPlan {
  IndexList order;
  std::vector<std::size_t> offsets;  // n_matrices + 1 entries
  std::vector<std::size_t> counts;   // n_matrices entries

  std::size_t n_matrices() const { return counts.size(); }
  std::size_t n_rows() const { return order.size(); }
};

// Stable counting sort of row indices by selected matrix id.
// Throws ArgumentError when an index is >= n_matrices.
RoutingPlan plan_routing(std::span<const std::size_t> selection, std::size_t n_matrices);

// Conditional vector-matrix multiply:
//   out[n, l] = sum_m input[n, m] * matrices[selection[n], m, l]
// input is [N, M], matrices is [K, M, L]. Groups with no rows are skipped.
// Recorded on the tape with the hand-written backward below.
Tensor cvmm(const Tensor& input, std::span<const std::size_t> selection, const Tensor& matrices,
            const RoutingPlan& plan);

struct CvmmGrads {
  Tensor d_input;     // [N, M]
  Tensor d_matrices;  // [K, M, L]
};

// d_input[n] = d_out[n] * matrices[S[n]]^T
// d_matrices[k] = sum over rows n routed to k of input[n]^T d_out[n], summed
// in plan order.
CvmmGrads cvmm_backward(const Tensor& d_out, const Tensor& input, std::span<const std::size_t> selection,
                        const Tensor& matrices, const RoutingPlan& plan);

}  // namespace ffx
