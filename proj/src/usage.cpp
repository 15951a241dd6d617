#include "ffx/usage.hpp"

#include "ffx/error.hpp"

namespace ffx {

LayerUsage::LayerUsage(std::size_t n, std::size_t k_)
    : n_experts(n), k(k_), mass(n, 0.0), counts(n, 0), coselect(n * n, 0) {}

void LayerUsage::record(const IndexList& indices, std::span<const real> gates) {
  if (k == 0 || indices.size() % k != 0 || gates.size() != indices.size())
    throw DimensionError("LayerUsage::record: selection does not hold k entries per token");
  const std::size_t n_tokens = indices.size() / k;
  for (std::size_t t = 0; t < n_tokens; ++t) {
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t e = indices[t * k + j];
      if (e >= n_experts) throw ArgumentError("LayerUsage::record: expert id out of range");
      mass[e] += static_cast<double>(gates[t * k + j]);
      ++counts[e];
      for (std::size_t i = 0; i < k; ++i)
        if (i != j) ++coselect[e * n_experts + indices[t * k + i]];
    }
  }
  tokens += n_tokens;
}

void LayerUsage::merge(const LayerUsage& other) {
  if (n_experts == 0) {
    *this = other;
    return;
  }
  if (other.n_experts != n_experts || other.k != k) throw DimensionError("LayerUsage::merge: incompatible layers");
  tokens += other.tokens;
  for (std::size_t e = 0; e < n_experts; ++e) {
    mass[e] += other.mass[e];
    counts[e] += other.counts[e];
  }
  for (std::size_t i = 0; i < coselect.size(); ++i) coselect[i] += other.coselect[i];
}

}  // namespace ffx
