#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <vector>

#include "ffx/data.hpp"
#include "ffx/model.hpp"

namespace ffx {

struct TrainConfig {
  std::size_t steps = 2000;
  double lr = 2.5e-4;
  std::size_t warmup_steps = 0;
  double clip_norm = 0.25;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch = 16;
  std::size_t seq = 128;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t log_every = 1;
  bool reg_mean = false;  // average gamma * L over MoE layers instead of summing

  void validate() const;
};

// Linear warmup from 0 to lr over warmup_steps, then cosine decay reaching 0
// at step == steps.
double lr_schedule(std::size_t step, const TrainConfig& cfg);

// Rescales the gradients of `params` so their joint L2 norm is at most
// max_norm. Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

// Adam moments, one pair of buffers per model parameter.
struct OptState {
  explicit OptState(const LMState& state);

  std::vector<std::vector<real>> m, v;
  std::uint64_t step = 0;
};

struct StepMetrics {
  std::uint64_t step = 0;
  double loss = 0;     // lm loss plus weighted regularizer
  double lm_loss = 0;
  double bpc = 0;      // lm_loss / ln 2
  double lr = 0;
  double grad_norm = 0;  // before clipping
  // One entry per MoE layer, from normalized gate mass.
  std::vector<double> usage_entropy;
  std::vector<double> max_share;
};

// One optimizer step. Throws NumericalError if the loss or gradient norm is
// not finite; the message lists the offending step and per-parameter
// magnitudes.
StepMetrics train_step(LMState& state, OptState& opt, const Batch& batch, const TrainConfig& cfg, Rng& rng);

struct EvalMetrics {
  double loss = 0;
  double bpc = 0;
  double perplexity = 0;
  std::size_t tokens = 0;
};

// Mean next-byte loss over non-overlapping windows of `seq` predictions
// covering the whole split; windows are evaluated `batch` at a time.
// max_tokens > 0 truncates the split.
EvalMetrics evaluate(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq, std::size_t batch,
                     std::size_t max_tokens = 0);

// Writes "# threads=..,seed=.." then a header row, then one row per call.
class MetricsWriter {
 public:
  MetricsWriter(std::ostream& os, const LMState& state, std::size_t threads, std::uint64_t seed);
  void write(const StepMetrics& m);

 private:
  std::ostream& os_;
  std::size_t moe_layers_;
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_log;        // every log_every steps and at the last step
  std::function<void(const LMState&)> on_checkpoint;     // every checkpoint_every steps and at the end
};

// Runs cfg.steps - state.step optimizer steps on the train split, streaming
// batches from cursor 0. Dropout and expert dropout draw from an Rng seeded
// from cfg.seed.
void train(LMState& state, const Corpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace ffx
