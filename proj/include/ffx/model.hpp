#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ffx/approx_ff.hpp"
#include "ffx/tensor.hpp"
#include "ffx/usage.hpp"

namespace ffx {

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 128;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t head_size = 32;
  std::size_t context_len = 128;
  FFBlockConfig ff;  // ff.d_model is kept equal to d_model
  real dropout = real(0.1);

  void validate() const;
  bool operator==(const ModelConfig&) const;
};

// Parameter count implied by a config, without building the model.
std::size_t parameter_count(const ModelConfig& cfg);

// Named parameters of a pre-layernorm causal transformer. Names look like
// "embed.weight", "layers.0.attn.qkv.weight", "layers.1.ff.expert_w1".
class LMState {
 public:
  LMState(ModelConfig cfg, Rng& rng);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<std::pair<std::string, Tensor>>& parameters() const { return params_; }
  Tensor parameter(const std::string& name) const;  // throws ArgumentError if absent
  std::size_t parameter_count() const;

  std::uint64_t step = 0;
  MoEForwardOptions moe_options;  // applied to every MoE block

 private:
  friend struct LMForwardAccess;

  struct Layer {
    Tensor ln1_gain, ln1_bias, qkv_weight, qkv_bias, proj_weight, proj_bias, ln2_gain, ln2_bias;
    FFBlock ff;
  };

  ModelConfig cfg_;
  Tensor embed_, ln_f_gain_, ln_f_bias_, out_weight_, out_bias_;
  std::vector<Layer> layers_;
  std::vector<std::pair<std::string, Tensor>> params_;
};

struct LMOutput {
  Tensor logits;                     // [B, T, V]
  Tensor total_reg;                  // sum over MoE layers of gamma * L; zero scalar otherwise
  std::vector<Tensor> layer_reg;     // unweighted per-layer regularizer (MoE layers only)
  std::vector<LayerUsage> usage;     // one per layer; empty entries for non-MoE layers
  std::vector<std::vector<std::size_t>> active_units;  // per layer, per token; dense/topk with trace
};

// tokens holds batch * time ids in row-major order.
// Throws DataError for ids >= vocab_size and ArgumentError if time exceeds the
// context length.
LMOutput lm_forward(const IndexList& tokens, std::size_t batch, std::size_t time, const LMState& state, Mode mode,
                    Rng& rng, bool trace = false);

// Mean token cross-entropy of logits [B, T, V] (or [B*T, V]) against targets.
Tensor lm_loss(const Tensor& logits, const IndexList& targets);

// Checkpoints: see docs/checkpoint_format.md.
void save_checkpoint(const std::filesystem::path& path, const LMState& state);
// Throws VersionError for a bad magic, unsupported version, checksum
// mismatch, or truncated file.
LMState load_checkpoint(const std::filesystem::path& path);
// As above, and additionally throws VersionError when the stored model
// config differs from `expected`.
LMState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace ffx
