#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ffx/ops.hpp"
#include "ffx/tensor.hpp"
#include "ffx/usage.hpp"

namespace ffx {

// Feedforward blocks that approximate y = W2 relu(W1 x) by keeping only a
// few key-value pairs: top-K activation, product-key memory, and mixtures of
// experts. Weights follow the key-value layout: W1 rows are keys, W2 columns
// are values. Biases are omitted throughout.

enum class Mode { train, eval };
enum class FFKind { dense, topk, pkm, moe };
enum class PkmActivation { relu, softmax };
enum class Selection { sigmoid, softmax_topk, topk_softmax_renorm, noisy_topk, sinkhorn };
enum class Regularizer { entropy, switch_balance, cv, none };
enum class MoEInit { sigma_moe, standard, switch_init };

std::string_view to_string(FFKind v);
std::string_view to_string(PkmActivation v);
std::string_view to_string(Selection v);
std::string_view to_string(Regularizer v);
std::string_view to_string(MoEInit v);
// Inverse of to_string; throws ConfigError naming the accepted values.
FFKind parse_ff_kind(std::string_view s);
PkmActivation parse_pkm_activation(std::string_view s);
Selection parse_selection(std::string_view s);
Regularizer parse_regularizer(std::string_view s);
MoEInit parse_moe_init(std::string_view s);

struct MoEConfig {
  std::size_t n_experts = 8;    // N_E
  std::size_t expert_size = 64;  // G
  std::size_t k = 2;             // experts per token
  Selection selection = Selection::sigmoid;
  Regularizer regularizer = Regularizer::entropy;
  real gamma = real(0.001);         // regularizer weight
  real expert_dropout = 0;          // delta
  MoEInit init = MoEInit::sigma_moe;
  std::size_t sinkhorn_iters = 3;

  void validate() const;
};

struct FFBlockConfig {
  FFKind kind = FFKind::dense;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t k = 64;  // top-K for topk and pkm
  PkmActivation activation = PkmActivation::relu;
  MoEConfig moe;

  // Throws ConfigError: moe needs N_E * G == d_ff; pkm needs a square d_ff,
  // even d_model and K <= sqrt(d_ff); topk needs 1 <= K <= d_ff.
  void validate() const;
  std::size_t pkm_subkeys() const;  // sqrt(d_ff)
};

// ---- dense reference and key-value view ----

// y = W2 relu(W1 x) for every row of x [B, d_model]; W1 [d_ff, d_model],
// W2 [d_model, d_ff].
Tensor dense_mlp_forward(const Tensor& x, const Tensor& w1, const Tensor& w2);

// y = sum_i relu(k_i . x) v_i evaluated pair by pair. keys and values are
// [d_ff, d_model] with one key / value per row. Not differentiable.
Tensor keyvalue_forward(const Tensor& x, const Tensor& keys, const Tensor& values);

// ---- top-K ----

// Zeroes all but the K largest entries of every row of u; gradients reach the
// kept entries only.
Tensor topk_activation(const Tensor& u, std::size_t k);

// Keeps the K largest entries of every row and divides them by their sum. A
// row whose kept entries sum to zero becomes uniform 1/K over the kept set and
// increments norm_topk_degenerate_count().
Tensor norm_topk(const Tensor& s, std::size_t k);
std::size_t norm_topk_degenerate_count();

// ---- product-key memory ----

// Full index i of the product key combines sub-key (i mod n) of the first
// half with sub-key (i / n) of the second half, n = sqrt(d_ff).
// The K*K candidate indices built from the top-K of each half, in
// (b-major, a-minor) order.
IndexList pkm_candidates(std::span<const real> u_a, std::span<const real> u_b, std::size_t k);
// Top-K full indices of u[i] = u_b[i / n] + u_a[i mod n], searched over the
// candidate set only.
IndexList pkm_select(std::span<const real> u_a, std::span<const real> u_b, std::size_t k);

// x [B, d_model] is split into halves x_a | x_b; wa, wb [sqrt(d_ff), d_model/2];
// values [d_ff, d_model]. Readout is relu or a softmax over the K selected
// scores.
Tensor pkm_forward(const Tensor& x, const Tensor& wa, const Tensor& wb, const Tensor& values, std::size_t k,
                   PkmActivation activation);

// ---- mixture of experts ----

// Expert weights stored in the orientation the grouped kernel consumes:
// w1[e] is W1^e transposed (d_model x G), w2[e] is W2^e transposed
// (G x d_model).
struct ExpertWeights {
  Tensor w1;  // [N_E, d_model, G]
  Tensor w2;  // [N_E, G, d_model]
  Tensor w3;  // [N_E, d_model] selection
  Tensor w4;  // [N_E, d_model] noise scale; only for noisy_topk

  std::vector<std::pair<std::string, Tensor>> named() const;
};

// Dense equivalents built by concatenating the experts along the key axis:
// [d_ff, d_model] and [d_model, d_ff].
Tensor concat_up_projection(const ExpertWeights& w);
Tensor concat_down_projection(const ExpertWeights& w);

struct ExpertSelection {
  std::size_t k = 0;
  IndexList indices;          // k expert ids per token, by decreasing selection score
  Tensor gates;               // [B, k] gate values for `indices`
  Tensor full_scores;         // [B, N_E] activation over all experts
  Tensor logits;              // [B, N_E] W3 x
  std::vector<real> dropout;  // per-expert keep mask applied to this batch
};

// Bernoulli(1 - delta) keep mask over experts; all ones in eval mode or for
// delta == 0. A draw keeping fewer than `min_keep` experts is redrawn once,
// and replaced by all ones if it fails again. Never rescales.
std::vector<real> expert_dropout_mask(real delta, std::size_t n_experts, Mode mode, Rng& rng,
                                      std::size_t min_keep = 1);

// Log-domain Sinkhorn over a [B, N_E] score matrix: start from a row softmax,
// then alternate column scaling (to B / N_E) and row scaling (to 1) for
// `iters` rounds. Not differentiable.
Tensor sinkhorn_normalize(const Tensor& scores, std::size_t iters);

// w4 may be undefined unless cfg.selection is noisy_topk.
ExpertSelection select_experts(const Tensor& x, const Tensor& w3, const Tensor& w4, const MoEConfig& cfg, Mode mode,
                               Rng& rng);

// Unweighted load-balancing loss for one layer (scalar tensor; zero for
// Regularizer::none).
Tensor regularizer(const ExpertSelection& selection, Regularizer variant, std::size_t n_experts);

struct MoEForwardOptions {
  bool unit_gates = false;  // replace gate values with 1
};

struct MoEOutput {
  Tensor y;         // [B, d_model]
  Tensor reg_loss;  // scalar, not multiplied by gamma
  ExpertSelection selection;
  LayerUsage usage;
};

MoEOutput moe_forward(const Tensor& x, const ExpertWeights& weights, const MoEConfig& cfg, Mode mode, Rng& rng,
                      const MoEForwardOptions& options = {});

ExpertWeights init_moe(const MoEConfig& cfg, std::size_t d_model, std::size_t d_ff, std::size_t n_layers, Rng& rng);

// ---- block wrapper used by the language model ----

struct FFForward {
  Tensor y;
  Tensor reg_loss;                        // undefined for non-MoE blocks
  LayerUsage usage;                       // MoE only
  std::vector<std::size_t> active_units;  // per token count of u > 0; dense/topk with tracing on
};

// Owns the parameters of one feedforward block of any kind.
class FFBlock {
 public:
  FFBlock(FFBlockConfig cfg, std::size_t n_layers, Rng& rng);

  FFForward forward(const Tensor& x, Mode mode, Rng& rng, bool trace = false,
                    const MoEForwardOptions& options = {}) const;

  const FFBlockConfig& config() const { return cfg_; }
  // Parameters with names relative to the block ("w1", "expert_w1", ...).
  std::vector<std::pair<std::string, Tensor>> parameters() const;
  std::size_t parameter_count() const;

 private:
  FFBlockConfig cfg_;
  Tensor w1_, w2_;              // dense / topk
  Tensor wa_, wb_, values_;     // pkm
  ExpertWeights experts_;       // moe
};

}  // namespace ffx
