#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "ffx/data.hpp"
#include "ffx/model.hpp"

namespace ffx {

struct ChannelCounts {
  std::vector<double> mean, stddev;                 // per layer
  std::vector<std::vector<std::size_t>> per_token;  // per layer, every evaluated token
};

// Number of u > 0 entries per token, per layer, over eval-mode windows of the
// split. Only dense and topk blocks materialize u; other kinds throw
// ConfigError.
ChannelCounts active_channel_count(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq,
                                   std::size_t batch, std::size_t max_tokens = 0);

// Selection statistics per layer accumulated in eval mode. Throws ConfigError
// for non-MoE models.
std::vector<LayerUsage> collect_usage(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq,
                                      std::size_t batch, std::size_t max_tokens = 0);

// Per-expert shares sorted by popularity. Without `normalize` each share is
// the fraction of tokens that selected the expert, so the shares sum to K;
// with it, shares are fractions of the total gate mass and sum to 1.
std::vector<double> expert_usage(const LayerUsage& usage, bool normalize);

// Row-major N_E x N_E matrix whose row i is the distribution of experts
// selected together with i. Diagonal is zero; rows of unused experts are zero.
// Throws ConfigError when K == 1.
std::vector<double> cooccurrence(const LayerUsage& usage);

struct ResourceReport {
  std::string kind;
  std::size_t d_model = 0;
  std::size_t d_ff = 0;
  std::size_t n_experts = 0;
  std::size_t expert_size = 0;
  std::size_t k = 0;
  std::uint64_t ff_macs = 0;     // per token, measured
  std::uint64_t dense_macs = 0;  // per token, dense block of the same d_ff
  double flops_ratio = 0;
  double memory_ratio = 0;       // hidden activations stored per token vs dense
  std::size_t params = 0;        // includes the selection matrix
  std::size_t dense_params = 0;
};

// Feedforward-path multiply-accumulates measured by running the block under
// a MAC counter. Selection (W3) work is excluded from the ratio.
ResourceReport flops_memory_report(const FFBlockConfig& cfg);

void write_resource_csv(std::ostream& os, const std::vector<ResourceReport>& rows);
void write_resource_jsonl(std::ostream& os, const std::vector<ResourceReport>& rows);
// One line per (layer, rank) with the sorted share.
void write_usage_csv(std::ostream& os, const std::vector<std::vector<double>>& shares);
void write_cooccurrence_jsonl(std::ostream& os, const std::vector<LayerUsage>& usage);
void write_channels_csv(std::ostream& os, const ChannelCounts& counts);

}  // namespace ffx
