#include "ffx/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ffx/autograd.hpp"
#include "ffx/config.hpp"
#include "ffx/error.hpp"

namespace ffx {

void TrainConfig::validate() const {
  if (steps < 1) throw ConfigError("train.steps must be at least 1");
  if (!(lr > 0)) throw ConfigError("train.lr must be positive");
  if (warmup_steps > steps) throw ConfigError("train.warmup_steps exceeds train.steps");
  if (!(clip_norm > 0)) throw ConfigError("train.clip_norm must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("train.eps must be positive");
  if (batch == 0 || seq == 0) throw ConfigError("train.batch and train.seq must be positive");
  if (log_every == 0) throw ConfigError("train.log_every must be positive");
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  step = std::min(step, cfg.steps);
  if (step < cfg.warmup_steps) return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const std::size_t decay = cfg.steps - cfg.warmup_steps;
  if (decay == 0) return cfg.lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(decay);
  return 0.5 * cfg.lr * (1 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0;
  for (const Tensor& p : params)
    if (p.has_grad())
      for (real g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const real s = static_cast<real>(max_norm / norm);
    for (const Tensor& p : params)
      if (p.has_grad())
        for (real& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

OptState::OptState(const LMState& state) {
  for (const auto& [name, t] : state.parameters()) {
    m.emplace_back(t.numel(), real(0));
    v.emplace_back(t.numel(), real(0));
  }
}

namespace {

std::string dump_parameters(const LMState& state) {
  std::ostringstream os;
  for (const auto& [name, t] : state.parameters()) {
    double w = 0, g = 0;
    bool finite = true;
    for (real x : t.data()) {
      w = std::max(w, std::abs(static_cast<double>(x)));
      finite &= std::isfinite(x);
    }
    if (t.has_grad())
      for (real x : t.grad()) {
        g = std::max(g, std::abs(static_cast<double>(x)));
        finite &= std::isfinite(x);
      }
    os << "\n  " << name << ": max|w|=" << w << " max|g|=" << g << (finite ? "" : " NON-FINITE");
  }
  return os.str();
}

void usage_summary(const LayerUsage& u, double& entropy, double& max_share) {
  double total = 0;
  for (double m : u.mass) total += m;
  entropy = 0;
  max_share = 0;
  if (total <= 0) return;
  for (double m : u.mass) {
    const double p = m / total;
    if (p > 0) entropy -= p * std::log(p);
    max_share = std::max(max_share, p);
  }
}

}  // namespace

StepMetrics train_step(LMState& state, OptState& opt, const Batch& batch, const TrainConfig& cfg, Rng& rng) {
  const auto& params = state.parameters();
  for (const auto& [name, t] : params) Tensor(t).clear_grad();
  Tape::current().clear();

  LMOutput out = lm_forward(batch.inputs, batch.batch, batch.time, state, Mode::train, rng);
  Tensor lm = lm_loss(out.logits, batch.targets);
  Tensor reg = out.total_reg;
  if (cfg.reg_mean && !out.layer_reg.empty()) reg = scale(reg, real(1) / static_cast<real>(out.layer_reg.size()));
  Tensor loss = add(lm, reg);

  StepMetrics m;
  m.step = state.step + 1;  // counts completed updates
  m.loss = loss.item();
  m.lm_loss = lm.item();
  m.bpc = m.lm_loss / std::numbers::ln2;
  m.lr = lr_schedule(state.step, cfg);
  if (!std::isfinite(m.loss)) {
    Tape::current().clear();
    throw NumericalError("non-finite loss at step " + std::to_string(state.step) + " (lm " + format_real(m.lm_loss) +
                         ", reg " + format_real(reg.item()) + ")" + dump_parameters(state));
  }

  backward(loss);
  std::vector<Tensor> tensors;
  for (const auto& [name, t] : params) tensors.push_back(t);
  m.grad_norm = clip_grad_norm(tensors, cfg.clip_norm);
  if (!std::isfinite(m.grad_norm))
    throw NumericalError("non-finite gradient norm at step " + std::to_string(state.step) + dump_parameters(state));

  ++opt.step;
  const double c1 = 1 - std::pow(cfg.beta1, static_cast<double>(opt.step));
  const double c2 = 1 - std::pow(cfg.beta2, static_cast<double>(opt.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    if (!t.has_grad()) continue;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& mm = opt.m[p];
    auto& vv = opt.v[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      mm[i] = static_cast<real>(cfg.beta1 * mm[i] + (1 - cfg.beta1) * g[i]);
      vv[i] = static_cast<real>(cfg.beta2 * vv[i] + (1 - cfg.beta2) * g[i] * g[i]);
      const double mhat = mm[i] / c1, vhat = vv[i] / c2;
      w[i] -= static_cast<real>(m.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  ++state.step;

  for (const LayerUsage& u : out.usage) {
    if (u.n_experts == 0) continue;
    double h, s;
    usage_summary(u, h, s);
    m.usage_entropy.push_back(h);
    m.max_share.push_back(s);
  }
  return m;
}

EvalMetrics evaluate(const LMState& state, const Corpus& corpus, SplitName split, std::size_t seq, std::size_t batch,
                     std::size_t max_tokens) {
  const SplitRange& r = corpus.split(split);
  if (r.size() < 2) throw DataError(std::string(to_string(split)) + " split is too small to evaluate");
  if (seq == 0 || batch == 0) throw ArgumentError("evaluate: seq and batch must be positive");
  seq = std::min(seq, state.config().context_len);
  std::size_t predictions = r.size() - 1;
  if (max_tokens > 0) predictions = std::min(predictions, max_tokens);

  NoGradGuard guard;
  Rng unused(0);
  double total = 0;
  std::size_t counted = 0;
  // Full windows go in groups of `batch`; a trailing partial window runs alone.
  const std::size_t full = predictions / seq;
  auto run = [&](std::size_t first_window, std::size_t n_windows, std::size_t time) {
    IndexList inputs(n_windows * time), targets(n_windows * time);
    for (std::size_t w = 0; w < n_windows; ++w) {
      const std::size_t start = r.begin + (first_window + w) * seq;
      for (std::size_t t = 0; t < time; ++t) {
        inputs[w * time + t] = corpus.bytes[start + t];
        targets[w * time + t] = corpus.bytes[start + t + 1];
      }
    }
    LMOutput out = lm_forward(inputs, n_windows, time, state, Mode::eval, unused);
    total += lm_loss(out.logits, targets).item() * static_cast<double>(n_windows * time);
    counted += n_windows * time;
  };
  for (std::size_t w = 0; w < full; w += batch) run(w, std::min(batch, full - w), seq);
  if (const std::size_t rest = predictions - full * seq; rest > 0) run(full, 1, rest);

  EvalMetrics e;
  e.tokens = counted;
  e.loss = total / static_cast<double>(counted);
  e.bpc = e.loss / std::numbers::ln2;
  e.perplexity = std::exp(e.loss);
  return e;
}

MetricsWriter::MetricsWriter(std::ostream& os, const LMState& state, std::size_t threads, std::uint64_t seed)
    : os_(os), moe_layers_(state.config().ff.kind == FFKind::moe ? state.config().n_layers : 0) {
  os_ << "# threads=" << threads << ",seed=" << seed << '\n';
  os_ << "step,loss,lm_loss,bpc,lr,grad_norm";
  for (std::size_t l = 0; l < moe_layers_; ++l) os_ << ",usage_entropy_" << l;
  for (std::size_t l = 0; l < moe_layers_; ++l) os_ << ",max_share_" << l;
  os_ << '\n';
}

void MetricsWriter::write(const StepMetrics& m) {
  os_ << m.step << ',' << format_real(m.loss) << ',' << format_real(m.lm_loss) << ',' << format_real(m.bpc) << ','
      << format_real(m.lr) << ',' << format_real(m.grad_norm);
  for (std::size_t l = 0; l < moe_layers_; ++l)
    os_ << ',' << (l < m.usage_entropy.size() ? format_real(m.usage_entropy[l]) : "");
  for (std::size_t l = 0; l < moe_layers_; ++l)
    os_ << ',' << (l < m.max_share.size() ? format_real(m.max_share[l]) : "");
  os_ << '\n';
  os_.flush();
}

void train(LMState& state, const Corpus& corpus, const TrainConfig& cfg, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.seq > state.config().context_len)
    throw ConfigError("train.seq (" + std::to_string(cfg.seq) + ") exceeds model.context_size (" +
                      std::to_string(state.config().context_len) + ")");
  OptState opt(state);
  std::seed_seq seq{cfg.seed, std::uint64_t{0x7472}, static_cast<std::uint64_t>(state.step)};
  Rng rng(seq);

  // Replay the cursor so a resumed run reads the batches it would have read.
  std::size_t cursor = 0;
  for (std::uint64_t s = 0; s < state.step; ++s) {
    const std::size_t stream = corpus.train.size() / cfg.batch;
    if (cursor + cfg.seq + 1 > stream) cursor = 0;
    cursor += cfg.seq;
  }

  while (state.step < cfg.steps) {
    Batch b = next_batch(corpus, SplitName::train, cfg.batch, cfg.seq, cursor);
    StepMetrics m = train_step(state, opt, b, cfg, rng);
    const bool last = state.step == cfg.steps;
    if (hooks.on_log && (state.step % cfg.log_every == 0 || last)) hooks.on_log(m);
    if (hooks.on_checkpoint && ((cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) || last))
      hooks.on_checkpoint(state);
  }
}

}  // namespace ffx
