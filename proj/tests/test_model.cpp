#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "ffx/config.hpp"
#include "ffx/error.hpp"
#include "ffx/model.hpp"
#include "support.hpp"

using namespace ffx;
using namespace ffx::testing;

namespace {

ModelConfig tiny(FFKind kind) {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.head_size = 8;
  c.context_len = 8;
  c.dropout = 0;
  c.ff.d_model = 16;
  c.ff.kind = kind;
  c.ff.d_ff = 64;
  c.ff.k = kind == FFKind::pkm ? 4 : 16;
  c.ff.moe.n_experts = 4;
  c.ff.moe.expert_size = 16;
  c.ff.moe.k = 2;
  return c;
}

IndexList random_tokens(std::size_t n, Rng& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, 255);
  IndexList t(n);
  for (auto& v : t) v = pick(rng);
  return t;
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("ffx_test_model_" + name);
}

}  // namespace

TEST_CASE("logit shapes") {
  Rng rng(1);
  LMState s(tiny(FFKind::dense), rng);
  LMOutput out = lm_forward({65}, 1, 1, s, Mode::eval, rng);
  CHECK(out.logits.shape() == Shape{1, 1, 256});
  CHECK(out.total_reg.item() == 0);

  CHECK_THROWS_AS(lm_forward({256}, 1, 1, s, Mode::eval, rng), DataError);
  CHECK_THROWS_AS(lm_forward(IndexList(9, 1), 1, 9, s, Mode::eval, rng), ArgumentError);
}

TEST_CASE("causality") {
  for (FFKind kind : {FFKind::dense, FFKind::moe}) {
    Rng rng(2);
    LMState s(tiny(kind), rng);
    IndexList tokens = random_tokens(2 * 8, rng);
    Tensor base = lm_forward(tokens, 2, 8, s, Mode::eval, rng).logits;
    for (std::size_t t = 1; t < 8; ++t) {
      IndexList changed = tokens;
      changed[t] = (changed[t] + 101) % 256;
      changed[8 + t] = (changed[8 + t] + 7) % 256;
      Tensor other = lm_forward(changed, 2, 8, s, Mode::eval, rng).logits;
      for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t p = 0; p < t; ++p)
          for (std::size_t v = 0; v < 256; ++v)
            REQUIRE(other.at((b * 8 + p) * 256 + v) == base.at((b * 8 + p) * 256 + v));
      bool moved = false;
      for (std::size_t v = 0; v < 256; ++v) moved |= other.at(t * 256 + v) != base.at(t * 256 + v);
      CHECK(moved);
    }
  }
}

TEST_CASE("parameter accounting") {
  ModelConfig dense = tiny(FFKind::dense);
  // embed 256*16 + out 256*16 + 256 + final norm 32
  // per layer: norms 64, qkv 768 + 48, proj 256 + 16, ff 2 * 16 * 64
  CHECK(parameter_count(dense) == 4096 + 4352 + 32 + 2 * (64 + 816 + 272 + 2048));
  ModelConfig moe = tiny(FFKind::moe);
  CHECK(parameter_count(moe) == parameter_count(dense) + 2 * 4 * 16);
  ModelConfig pkm = tiny(FFKind::pkm);
  CHECK(parameter_count(pkm) == parameter_count(dense) - 2 * (16 * 64) + 2 * (8 * 16));
  for (FFKind kind : {FFKind::dense, FFKind::topk, FFKind::pkm, FFKind::moe}) {
    Rng rng(3);
    ModelConfig c = tiny(kind);
    CHECK(LMState(c, rng).parameter_count() == parameter_count(c));
  }
  ModelConfig noisy = moe;
  noisy.ff.moe.selection = Selection::noisy_topk;
  Rng rng(3);
  CHECK(LMState(noisy, rng).parameter_count() == parameter_count(moe) + 2 * 4 * 16);
}

TEST_CASE("MoE model with pinned gates matches the dense model") {
  ModelConfig mc = tiny(FFKind::moe);
  mc.ff.moe.k = mc.ff.moe.n_experts;
  ModelConfig dc = tiny(FFKind::dense);
  Rng r1(4), r2(5);
  LMState moe(mc, r1);
  LMState dense(dc, r2);
  moe.moe_options.unit_gates = true;
  for (const auto& [name, t] : dense.parameters()) {
    if (name.find(".ff.") != std::string::npos) continue;
    auto src = moe.parameter(name).data();
    auto dst = dense.parameter(name).mutable_data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  for (std::size_t l = 0; l < 2; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".ff.";
    ExpertWeights w{moe.parameter(p + "expert_w1"), moe.parameter(p + "expert_w2"), moe.parameter(p + "w3"), {}};
    Tensor up = concat_up_projection(w), down = concat_down_projection(w);
    auto w1 = dense.parameter(p + "w1").mutable_data();
    auto w2 = dense.parameter(p + "w2").mutable_data();
    std::copy(up.data().begin(), up.data().end(), w1.begin());
    std::copy(down.data().begin(), down.data().end(), w2.begin());
  }
  Rng rng(6);
  IndexList tokens = random_tokens(3 * 8, rng);
  Tensor a = lm_forward(tokens, 3, 8, moe, Mode::eval, rng).logits;
  Tensor b = lm_forward(tokens, 3, 8, dense, Mode::eval, rng).logits;
  double worst = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, rel_err(a.at(i), b.at(i), 1e-6));
  CHECK(worst < 1e-10);
}

TEST_CASE("language-model loss") {
  Tensor uniform_logits = Tensor::zeros({2, 3, 256});
  const double loss = lm_loss(uniform_logits, IndexList{1, 2, 3, 4, 5, 6}).item();
  CHECK(loss == doctest::Approx(std::log(256.0)).epsilon(1e-14));
  CHECK(loss / std::log(2.0) == doctest::Approx(8.0).epsilon(1e-14));

  std::vector<real> peaked(2 * 256, 0);
  peaked[7] = 60;
  peaked[256 + 9] = 60;
  CHECK(lm_loss(Tensor::from({1, 2, 256}, peaked), IndexList{7, 9}).item() < 1e-20);

  Rng rng(7);
  Tensor logits = uniform({2, 2, 5}, rng, false, -3, 3);
  IndexList targets{4, 0, 2, 2};
  double ref = 0;
  for (std::size_t r = 0; r < 4; ++r) {
    double z = 0;
    for (std::size_t v = 0; v < 5; ++v) z += std::exp(logits.at(r * 5 + v));
    ref += std::log(z) - logits.at(r * 5 + targets[r]);
  }
  CHECK(lm_loss(logits, targets).item() == doctest::Approx(ref / 4).epsilon(1e-13));
}

TEST_CASE("end-to-end gradient check") {
  for (FFKind kind : {FFKind::dense, FFKind::topk, FFKind::pkm, FFKind::moe}) {
    CAPTURE(to_string(kind));
    Rng rng(8);
    LMState s(tiny(kind), rng);
    IndexList tokens = random_tokens(2 * 6, rng);
    IndexList targets = random_tokens(2 * 6, rng);
    auto loss = [&] {
      Rng step(9);
      LMOutput o = lm_forward(tokens, 2, 6, s, Mode::train, step);
      return add(lm_loss(o.logits, targets), o.total_reg);
    };
    Tape::current().clear();
    for (const auto& [n, t] : s.parameters()) Tensor(t).clear_grad();
    backward(loss());

    std::uniform_int_distribution<std::size_t> pick_param(0, s.parameters().size() - 1);
    double worst = 0;
    for (int probe = 0; probe < 20; ++probe) {
      Tensor t = s.parameters()[pick_param(rng)].second;
      std::uniform_int_distribution<std::size_t> pick(0, t.numel() - 1);
      const std::size_t i = pick(rng);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const real saved = t.data()[i];
      const double h = 1e-5;
      double plus, minus;
      {
        NoGradGuard guard;
        t.mutable_data()[i] = saved + h;
        plus = loss().item();
        t.mutable_data()[i] = saved - h;
        minus = loss().item();
        t.mutable_data()[i] = saved;
      }
      worst = std::max(worst, rel_err(analytic, (plus - minus) / (2 * h)));
    }
    CHECK(worst < 1e-3);
  }
}

TEST_CASE("checkpoint round trip") {
  Rng rng(10);
  ModelConfig cfg = tiny(FFKind::moe);
  cfg.ff.moe.gamma = 0.001;
  cfg.ff.moe.expert_dropout = 0.05;
  LMState s(cfg, rng);
  s.step = 1234;
  const auto path = temp_file("roundtrip.ckpt");
  save_checkpoint(path, s);
  LMState back = load_checkpoint(path, cfg);
  CHECK(back.step == 1234);
  CHECK(back.config() == cfg);
  for (const auto& [name, t] : s.parameters()) CHECK(back.parameter(name).to_vector() == t.to_vector());

  ModelConfig other = cfg;
  other.ff.moe.k = 1;
  CHECK_THROWS_AS(load_checkpoint(path, other), VersionError);

  std::string bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }
  auto write = [&](const std::string& data) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(data.data(), static_cast<std::streamsize>(data.size()));
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write(flipped);
  CHECK_THROWS_AS(load_checkpoint(path), VersionError);
  write(bytes.substr(0, bytes.size() / 3));
  CHECK_THROWS_AS(load_checkpoint(path), VersionError);
  write("not a checkpoint at all");
  CHECK_THROWS_AS(load_checkpoint(path), VersionError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path), DataError);
}

TEST_CASE("model config text round trip") {
  ModelConfig cfg = tiny(FFKind::moe);
  cfg.ff.moe.gamma = 0.001;
  cfg.ff.moe.selection = Selection::sinkhorn;
  const std::string text = model_config_to_text(cfg);
  ModelConfig back = model_config_from_text(text);
  CHECK(model_config_to_text(back) == text);
  CHECK(back.ff.d_model == 16);
  CHECK_THROWS_AS(model_config_from_text("[moe]\nN_X = 3\n"), ConfigError);
}
