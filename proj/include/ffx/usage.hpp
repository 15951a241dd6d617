#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ffx/ops.hpp"

namespace ffx {

// Selection statistics of one MoE layer accumulated over tokens.
struct LayerUsage {
  std::size_t n_experts = 0;
  std::size_t k = 0;
  std::uint64_t tokens = 0;
  std::vector<double> mass;              // summed gate values per expert
  std::vector<std::uint64_t> counts;     // times each expert was selected
  std::vector<std::uint64_t> coselect;   // n_experts x n_experts, zero diagonal

  LayerUsage() = default;
  LayerUsage(std::size_t n_experts, std::size_t k);

  // indices holds k expert ids per token; gates the matching gate values.
  void record(const IndexList& indices, std::span<const real> gates);
  // Merging into a default-constructed value copies `other`.
  void merge(const LayerUsage& other);
};

}  // namespace ffx
