#include <cmath>
#include <filesystem>
#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ffx/analysis.hpp"
#include "ffx/autograd.hpp"
#include "ffx/error.hpp"
#include "support.hpp"

using namespace ffx;

namespace {

ModelConfig model(FFKind kind) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_size = 8;
  c.context_len = 16;
  c.ff.d_model = 16;
  c.ff.kind = kind;
  c.ff.d_ff = 64;
  c.ff.k = kind == FFKind::pkm ? 4 : 8;
  c.ff.moe.n_experts = 4;
  c.ff.moe.expert_size = 16;
  c.ff.moe.k = 2;
  return c;
}

Corpus fixture() { return load_corpus(std::filesystem::path(FFX_TEST_DATA) / "fixture_1kb.txt", {0.8, 0.1, 0.1}); }

LayerUsage usage_from(std::size_t n_experts, std::size_t k, const std::vector<IndexList>& picks) {
  LayerUsage u(n_experts, k);
  for (const IndexList& p : picks) u.record(p, std::vector<real>(k, real(1)));
  return u;
}

}  // namespace

TEST_CASE("active channel counts") {
  const Corpus corpus = fixture();
  for (FFKind kind : {FFKind::dense, FFKind::topk}) {
    CAPTURE(to_string(kind));
    Rng rng(1);
    LMState s(model(kind), rng);
    ChannelCounts c = active_channel_count(s, corpus, SplitName::valid, 16, 3);
    REQUIRE(c.mean.size() == 2);
    CHECK(c.per_token[0].size() == corpus.valid.size() - 1);

    // Recount directly from the traced hidden activations of one forward pass
    // over the same windows.
    const SplitRange& r = corpus.valid;
    std::vector<std::vector<std::size_t>> expected(2);
    Rng unused(0);
    NoGradGuard guard;
    for (std::size_t start = r.begin; start + 1 < r.end; start += 16) {
      const std::size_t len = std::min<std::size_t>(16, r.end - 1 - start);
      IndexList in(corpus.bytes.begin() + start, corpus.bytes.begin() + start + len);
      LMOutput out = lm_forward(in, 1, len, s, Mode::eval, unused, true);
      for (std::size_t l = 0; l < 2; ++l)
        expected[l].insert(expected[l].end(), out.active_units[l].begin(), out.active_units[l].end());
    }
    for (std::size_t l = 0; l < 2; ++l) {
      CHECK(c.per_token[l] == expected[l]);
      double mean = 0;
      for (auto n : expected[l]) mean += static_cast<double>(n);
      mean /= static_cast<double>(expected[l].size());
      CHECK(c.mean[l] == doctest::Approx(mean).epsilon(1e-12));
      if (kind == FFKind::topk)
        for (auto n : expected[l]) CHECK(n <= 8);
    }
  }
  for (FFKind kind : {FFKind::pkm, FFKind::moe}) {
    Rng rng(1);
    LMState s(model(kind), rng);
    CHECK_THROWS_AS(active_channel_count(s, corpus, SplitName::valid, 16, 3), ConfigError);
  }
}

TEST_CASE("traced counts against the hidden activations") {
  // Dense block on its own: recount u > 0 from relu(x W1^T).
  Rng rng(2);
  FFBlockConfig cfg = model(FFKind::dense).ff;
  FFBlock block(cfg, 2, rng);
  Tensor x = testing::uniform({5, 16}, rng, false);
  FFForward f = block.forward(x, Mode::eval, rng, true);
  Tensor w1 = block.parameters()[0].second;
  for (std::size_t t = 0; t < 5; ++t) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < 64; ++j) {
      double u = 0;
      for (std::size_t i = 0; i < 16; ++i) u += x.at(t, i) * w1.at(j, i);
      n += u > 0;
    }
    CHECK(f.active_units[t] == n);
  }

  // All-negative pre-activations give zero; identity on positive inputs gives d_ff.
  FFBlockConfig sq = cfg;
  sq.d_ff = 16;
  FFBlock ident(sq, 1, rng);
  auto w = ident.parameters()[0].second.mutable_data();
  for (std::size_t i = 0; i < 16; ++i)
    for (std::size_t j = 0; j < 16; ++j) w[i * 16 + j] = i == j ? 1 : 0;
  CHECK(ident.forward(Tensor::full({1, 16}, -1), Mode::eval, rng, true).active_units[0] == 0);
  CHECK(ident.forward(Tensor::full({1, 16}, 2), Mode::eval, rng, true).active_units[0] == 16);
}

TEST_CASE("expert usage shares") {
  LayerUsage one = usage_from(1, 1, {{0}, {0}, {0}});
  CHECK(expert_usage(one, false) == std::vector<double>{1.0});
  CHECK(expert_usage(one, true) == std::vector<double>{1.0});

  std::vector<IndexList> rr;
  for (std::size_t t = 0; t < 40; ++t) rr.push_back({t % 8, (t + 1) % 8});
  for (double s : expert_usage(usage_from(8, 2, rr), true)) CHECK(s == doctest::Approx(0.125).epsilon(1e-15));
  for (double s : expert_usage(usage_from(8, 2, rr), false)) CHECK(s == doctest::Approx(0.25).epsilon(1e-15));

  CHECK_THROWS_AS(expert_usage(LayerUsage(4, 2), true), ArgumentError);
}

TEST_CASE("usage replay of a trained model") {
  // Shares from collect_usage against a recount of every selection.
  const Corpus corpus = fixture();
  Rng rng(3);
  LMState s(model(FFKind::moe), rng);
  const std::vector<LayerUsage> usage = collect_usage(s, corpus, SplitName::train, 16, 4, 200);

  std::vector<std::vector<double>> mass(2, std::vector<double>(4, 0));
  std::vector<std::vector<double>> count(2, std::vector<double>(4, 0));
  std::size_t tokens = 0;
  Rng unused(0);
  NoGradGuard guard;
  for (std::size_t start = 0; start < 200; start += 16) {
    const std::size_t len = std::min<std::size_t>(16, 200 - start);
    IndexList in(corpus.bytes.begin() + start, corpus.bytes.begin() + start + len);
    LMOutput out = lm_forward(in, 1, len, s, Mode::eval, unused, true);
    tokens += len;
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t e = 0; e < 4; ++e) {
        mass[l][e] += out.usage[l].mass[e];
        count[l][e] += static_cast<double>(out.usage[l].counts[e]);
      }
  }
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK(usage[l].tokens == tokens);
    double total = 0;
    for (double m : mass[l]) total += m;
    std::vector<double> want_norm, want_count;
    for (std::size_t e = 0; e < 4; ++e) {
      want_norm.push_back(mass[l][e] / total);
      want_count.push_back(count[l][e] / static_cast<double>(tokens));
    }
    std::sort(want_norm.rbegin(), want_norm.rend());
    std::sort(want_count.rbegin(), want_count.rend());
    const auto got_norm = expert_usage(usage[l], true);
    const auto got_count = expert_usage(usage[l], false);
    double sum_norm = 0, sum_count = 0;
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(got_norm[e] == doctest::Approx(want_norm[e]).epsilon(1e-12));
      CHECK(got_count[e] == doctest::Approx(want_count[e]).epsilon(1e-15));
      sum_norm += got_norm[e];
      sum_count += got_count[e];
    }
    CHECK(std::abs(sum_norm - 1) < 1e-9);
    CHECK(std::abs(sum_count - 2) < 1e-9);
  }

  LMState dense(model(FFKind::dense), rng);
  CHECK_THROWS_AS(collect_usage(dense, corpus, SplitName::train, 16, 4, 200), ConfigError);
}

TEST_CASE("co-occurrence") {
  SUBCASE("K = N_E gives uniform rows") {
    std::vector<IndexList> all(10, IndexList{0, 1, 2, 3});
    const auto m = cooccurrence(usage_from(4, 4, all));
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(m[i * 4 + j] == doctest::Approx(i == j ? 0.0 : 1.0 / 3));
  }
  SUBCASE("fixed pair") {
    const auto m = cooccurrence(usage_from(4, 2, std::vector<IndexList>(5, IndexList{1, 0})));
    CHECK(m[0 * 4 + 1] == 1.0);
    CHECK(m[1 * 4 + 0] == 1.0);
    for (std::size_t i = 2; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) CHECK(m[i * 4 + j] == 0.0);
  }
  SUBCASE("pair-count oracle") {
    Rng rng(4);
    std::vector<IndexList> picks;
    std::map<std::pair<std::size_t, std::size_t>, double> pairs;
    for (int t = 0; t < 500; ++t) {
      std::vector<std::size_t> perm(8);
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      IndexList p(perm.begin(), perm.begin() + 3);
      picks.push_back(p);
      for (auto a : p)
        for (auto b : p)
          if (a != b) pairs[{a, b}] += 1;
    }
    const auto m = cooccurrence(usage_from(8, 3, picks));
    for (std::size_t i = 0; i < 8; ++i) {
      double row = 0, sum = 0;
      for (std::size_t j = 0; j < 8; ++j) row += pairs[{i, j}];
      for (std::size_t j = 0; j < 8; ++j) {
        CHECK(m[i * 8 + j] == doctest::Approx(pairs[{i, j}] / row).epsilon(1e-15));
        sum += m[i * 8 + j];
      }
      CHECK(std::abs(sum - 1) < 1e-9);
    }
  }
  CHECK_THROWS_AS(cooccurrence(usage_from(4, 1, {{2}})), ConfigError);
}

TEST_CASE("resource report ratios") {
  auto moe = [](std::size_t ne, std::size_t k, std::size_t g) {
    FFBlockConfig c;
    c.d_model = 32;
    c.kind = FFKind::moe;
    c.moe.n_experts = ne;
    c.moe.expert_size = g;
    c.moe.k = k;
    c.d_ff = ne * g;
    return flops_memory_report(c);
  };
  CHECK(moe(16, 4, 32).flops_ratio == 0.25);
  CHECK(moe(32, 4, 16).flops_ratio == 0.125);
  CHECK(moe(16, 1, 32).flops_ratio == 0.0625);
  CHECK(moe(16, 8, 32).flops_ratio == 0.5);
  CHECK(moe(16, 4, 32).memory_ratio == 0.25);
  // Invariant to G at fixed K / N_E and total d_ff.
  CHECK(moe(8, 2, 64).flops_ratio == moe(32, 8, 16).flops_ratio);

  ResourceReport r = moe(16, 4, 32);
  CHECK(r.params == 2 * 32 * 512 + 16 * 32);  // includes the selection matrix
  CHECK(r.dense_params == 2 * 32 * 512);
  CHECK(r.ff_macs == 2 * 32 * 4 * 32);

  FFBlockConfig dense;
  dense.d_model = 32;
  dense.d_ff = 256;
  CHECK(flops_memory_report(dense).flops_ratio == 1.0);

  FFBlockConfig pkm = dense;
  pkm.kind = FFKind::pkm;
  pkm.k = 4;
  ResourceReport p = flops_memory_report(pkm);
  // Two half-width subkey projections onto 16 subkeys, K^2 candidates, K value rows.
  CHECK(p.ff_macs == 32 * 16 + 16 + 4 * 32);
  CHECK(p.flops_ratio == doctest::Approx(static_cast<double>(32 * 16 + 16 + 4 * 32) / (2 * 32 * 256)));

  std::ostringstream csv, jsonl;
  write_resource_csv(csv, {r, p});
  write_resource_jsonl(jsonl, {r});
  CHECK(csv.str().find("moe,32,512,16,32,4,") != std::string::npos);
  CHECK(jsonl.str().find("\"flops_ratio\":0.25") != std::string::npos);
}
