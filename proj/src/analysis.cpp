#include "ffx/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <nlohmann/json.hpp>

#include "ffx/autograd.hpp"
#include "ffx/config.hpp"
#include "ffx/counters.hpp"
#include "ffx/error.hpp"

namespace ffx {

namespace {

// Eval-mode forward over non-overlapping windows of the split.
void for_each_window(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq, std::size_t batch,
                     std::size_t max_tokens, const std::function<void(const LMOutput&)>& fn) {
  const SplitRange& r = corpus.split(split);
  if (r.size() < 2) throw DataError(std::string(to_string(split)) + " split is too small to analyze");
  seq = std::min(seq, state.config().context_len);
  std::size_t positions = r.size() - 1;
  if (max_tokens > 0) positions = std::min(positions, max_tokens);
  const std::size_t full = positions / seq;

  NoGradGuard guard;
  Rng unused(0);
  auto run = [&](std::size_t first, std::size_t n, std::size_t time) {
    IndexList inputs(n * time);
    for (std::size_t w = 0; w < n; ++w)
      for (std::size_t t = 0; t < time; ++t) inputs[w * time + t] = corpus.bytes[r.begin + (first + w) * seq + t];
    fn(lm_forward(inputs, n, time, state, Mode::eval, unused, true));
  };
  for (std::size_t w = 0; w < full; w += batch) run(w, std::min(batch, full - w), seq);
  if (const std::size_t rest = positions - full * seq; rest > 0) run(full, 1, rest);
}

}  // namespace

ChannelCounts active_channel_count(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq,
                                   std::size_t batch, std::size_t max_tokens) {
  const FFKind kind = state.config().ff.kind;
  if (kind != FFKind::dense && kind != FFKind::topk)
    throw ConfigError("active channel counts need a dense or topk feedforward block, not " +
                      std::string(to_string(kind)));
  const std::size_t L = state.config().n_layers;
  ChannelCounts c;
  c.per_token.resize(L);
  for_each_window(state, corpus, split, seq, batch, max_tokens, [&](const LMOutput& out) {
    for (std::size_t l = 0; l < L; ++l)
      c.per_token[l].insert(c.per_token[l].end(), out.active_units[l].begin(), out.active_units[l].end());
  });
  for (const auto& counts : c.per_token) {
    double sum = 0, sq = 0;
    for (std::size_t n : counts) sum += static_cast<double>(n);
    const double mean = sum / static_cast<double>(counts.size());
    for (std::size_t n : counts) sq += (static_cast<double>(n) - mean) * (static_cast<double>(n) - mean);
    c.mean.push_back(mean);
    c.stddev.push_back(std::sqrt(sq / static_cast<double>(counts.size())));
  }
  return c;
}

std::vector<LayerUsage> collect_usage(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq,
                                      std::size_t batch, std::size_t max_tokens) {
  if (state.config().ff.kind != FFKind::moe)
    throw ConfigError("expert usage needs a moe feedforward block, not " +
                      std::string(to_string(state.config().ff.kind)));
  std::vector<LayerUsage> usage(state.config().n_layers);
  for_each_window(state, corpus, split, seq, batch, max_tokens, [&](const LMOutput& out) {
    for (std::size_t l = 0; l < usage.size(); ++l) usage[l].merge(out.usage[l]);
  });
  return usage;
}

std::vector<double> expert_usage(const LayerUsage& usage, bool normalize) {
  if (usage.tokens == 0) throw ArgumentError("expert_usage: no tokens recorded");
  std::vector<double> shares(usage.n_experts);
  if (normalize) {
    double total = 0;
    for (double m : usage.mass) total += m;
    for (std::size_t e = 0; e < shares.size(); ++e) shares[e] = total > 0 ? usage.mass[e] / total : 0.0;
  } else {
    for (std::size_t e = 0; e < shares.size(); ++e)
      shares[e] = static_cast<double>(usage.counts[e]) / static_cast<double>(usage.tokens);
  }
  std::sort(shares.begin(), shares.end(), std::greater<>());
  return shares;
}

std::vector<double> cooccurrence(const LayerUsage& usage) {
  if (usage.k < 2) throw ConfigError("co-occurrence needs K >= 2 experts per token");
  const std::size_t n = usage.n_experts;
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t row = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) row += usage.coselect[i * n + j];
    if (row == 0) continue;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) out[i * n + j] = static_cast<double>(usage.coselect[i * n + j]) / static_cast<double>(row);
  }
  return out;
}

ResourceReport flops_memory_report(const FFBlockConfig& cfg) {
  cfg.validate();
  constexpr std::size_t tokens = 4;
  auto measure = [&](const FFBlockConfig& c, std::size_t& params) {
    Rng rng(0);
    FFBlock block(c, 1, rng);
    params = block.parameter_count();
    Tensor x = randn({tokens, c.d_model}, 1, rng);
    NoGradGuard guard;
    MacCounter counter;
    {
      MacCountingScope scope(counter);
      block.forward(x, Mode::eval, rng);
    }
    return counter.get("ff") / tokens;
  };

  ResourceReport r;
  r.kind = to_string(cfg.kind);
  r.d_model = cfg.d_model;
  r.d_ff = cfg.d_ff;
  FFBlockConfig dense = cfg;
  dense.kind = FFKind::dense;
  r.ff_macs = measure(cfg, r.params);
  r.dense_macs = measure(dense, r.dense_params);
  r.flops_ratio = static_cast<double>(r.ff_macs) / static_cast<double>(r.dense_macs);

  double hidden = static_cast<double>(cfg.d_ff);
  switch (cfg.kind) {
    case FFKind::dense:
    case FFKind::topk:
      break;
    case FFKind::pkm:
      r.k = cfg.k;
      hidden = static_cast<double>(2 * cfg.pkm_subkeys() + cfg.k * cfg.k + cfg.k);
      break;
    case FFKind::moe:
      r.n_experts = cfg.moe.n_experts;
      r.expert_size = cfg.moe.expert_size;
      r.k = cfg.moe.k;
      hidden = static_cast<double>(cfg.moe.k * cfg.moe.expert_size);
      break;
  }
  if (cfg.kind == FFKind::topk) r.k = cfg.k;
  r.memory_ratio = hidden / static_cast<double>(cfg.d_ff);
  return r;
}

void write_resource_csv(std::ostream& os, const std::vector<ResourceReport>& rows) {
  os << "kind,d_model,d_ff,N_E,G,K,ff_macs,dense_macs,flops_ratio,memory_ratio,params,dense_params\n";
  for (const auto& r : rows)
    os << r.kind << ',' << r.d_model << ',' << r.d_ff << ',' << r.n_experts << ',' << r.expert_size << ',' << r.k
       << ',' << r.ff_macs << ',' << r.dense_macs << ',' << format_real(r.flops_ratio) << ','
       << format_real(r.memory_ratio) << ',' << r.params << ',' << r.dense_params << '\n';
}

void write_resource_jsonl(std::ostream& os, const std::vector<ResourceReport>& rows) {
  for (const auto& r : rows) {
    nlohmann::json j{{"kind", r.kind},           {"d_model", r.d_model},       {"d_ff", r.d_ff},
                     {"N_E", r.n_experts},       {"G", r.expert_size},         {"K", r.k},
                     {"ff_macs", r.ff_macs},     {"dense_macs", r.dense_macs}, {"flops_ratio", r.flops_ratio},
                     {"memory_ratio", r.memory_ratio}, {"params", r.params},   {"dense_params", r.dense_params}};
    os << j.dump() << '\n';
  }
}

void write_usage_csv(std::ostream& os, const std::vector<std::vector<double>>& shares) {
  os << "layer,rank,share\n";
  for (std::size_t l = 0; l < shares.size(); ++l)
    for (std::size_t i = 0; i < shares[l].size(); ++i) os << l << ',' << i << ',' << format_real(shares[l][i]) << '\n';
}

void write_cooccurrence_jsonl(std::ostream& os, const std::vector<LayerUsage>& usage) {
  for (std::size_t l = 0; l < usage.size(); ++l) {
    const std::size_t n = usage[l].n_experts;
    const std::vector<double> m = cooccurrence(usage[l]);
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) rows.push_back(std::vector<double>(m.begin() + i * n, m.begin() + (i + 1) * n));
    os << nlohmann::json{{"layer", l}, {"matrix", rows}}.dump() << '\n';
  }
}

void write_channels_csv(std::ostream& os, const ChannelCounts& counts) {
  os << "layer,mean,std,tokens\n";
  for (std::size_t l = 0; l < counts.mean.size(); ++l)
    os << l << ',' << format_real(counts.mean[l]) << ',' << format_real(counts.stddev[l]) << ','
       << counts.per_token[l].size() << '\n';
}

}  // namespace ffx
