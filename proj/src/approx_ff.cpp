#include "ffx/approx_ff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "ffx/autograd.hpp"
#include "ffx/counters.hpp"
#include "ffx/cvmm.hpp"
#include "ffx/error.hpp"

namespace ffx {

// ---------------------------------------------------------------- enum names

namespace {

template <class E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, std::string_view> (&table)[N], const char* what) {
  std::string accepted;
  for (const auto& [value, name] : table) {
    if (name == s) return value;
    if (!accepted.empty()) accepted += ", ";
    accepted += name;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(s) + "' (expected one of: " + accepted + ")");
}

template <class E, std::size_t N>
std::string_view name_of(E v, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [value, name] : table)
    if (value == v) return name;
  return "?";
}

constexpr std::pair<FFKind, std::string_view> kKinds[] = {
    {FFKind::dense, "dense"}, {FFKind::topk, "topk"}, {FFKind::pkm, "pkm"}, {FFKind::moe, "moe"}};
constexpr std::pair<PkmActivation, std::string_view> kActs[] = {{PkmActivation::relu, "relu"},
                                                                {PkmActivation::softmax, "softmax"}};
constexpr std::pair<Selection, std::string_view> kSelections[] = {
    {Selection::sigmoid, "sigmoid"},
    {Selection::softmax_topk, "softmax_topk"},
    {Selection::topk_softmax_renorm, "topk_softmax_renorm"},
    {Selection::noisy_topk, "noisy_topk"},
    {Selection::sinkhorn, "sinkhorn"}};
constexpr std::pair<Regularizer, std::string_view> kRegs[] = {{Regularizer::entropy, "entropy"},
                                                              {Regularizer::switch_balance, "switch"},
                                                              {Regularizer::cv, "cv"},
                                                              {Regularizer::none, "none"}};
constexpr std::pair<MoEInit, std::string_view> kInits[] = {
    {MoEInit::sigma_moe, "sigma_moe"}, {MoEInit::standard, "standard"}, {MoEInit::switch_init, "switch"}};

}  // namespace

std::string_view to_string(FFKind v) { return name_of(v, kKinds); }
std::string_view to_string(PkmActivation v) { return name_of(v, kActs); }
std::string_view to_string(Selection v) { return name_of(v, kSelections); }
std::string_view to_string(Regularizer v) { return name_of(v, kRegs); }
std::string_view to_string(MoEInit v) { return name_of(v, kInits); }
FFKind parse_ff_kind(std::string_view s) { return parse_enum(s, kKinds, "ff kind"); }
PkmActivation parse_pkm_activation(std::string_view s) { return parse_enum(s, kActs, "pkm activation"); }
Selection parse_selection(std::string_view s) { return parse_enum(s, kSelections, "selection"); }
Regularizer parse_regularizer(std::string_view s) { return parse_enum(s, kRegs, "regularizer"); }
MoEInit parse_moe_init(std::string_view s) { return parse_enum(s, kInits, "init"); }

// ---------------------------------------------------------------- configs

void MoEConfig::validate() const {
  if (n_experts == 0 || expert_size == 0) throw ConfigError("moe: N_E and G must be positive");
  if (k == 0 || k > n_experts)
    throw ConfigError("moe: K=" + std::to_string(k) + " must be in [1, N_E=" + std::to_string(n_experts) + "]");
  if (!(gamma >= 0)) throw ConfigError("moe: gamma must be >= 0");
  if (!(expert_dropout >= 0 && expert_dropout < 1)) throw ConfigError("moe: delta must be in [0, 1)");
}

std::size_t FFBlockConfig::pkm_subkeys() const {
  auto n = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d_ff))));
  while (n * n > d_ff) --n;
  while ((n + 1) * (n + 1) <= d_ff) ++n;
  return n;
}

void FFBlockConfig::validate() const {
  if (d_model == 0 || d_ff == 0) throw ConfigError("ff: d_model and d_ff must be positive");
  switch (kind) {
    case FFKind::dense:
      break;
    case FFKind::topk:
      if (k == 0 || k > d_ff) throw ConfigError("ff: top-K needs 1 <= K <= d_ff");
      break;
    case FFKind::pkm: {
      const std::size_t n = pkm_subkeys();
      if (n * n != d_ff) throw ConfigError("pkm: d_ff=" + std::to_string(d_ff) + " is not a perfect square");
      if (d_model % 2 != 0) throw ConfigError("pkm: d_model must be even");
      if (k == 0 || k > n) throw ConfigError("pkm: K must be in [1, sqrt(d_ff)=" + std::to_string(n) + "]");
      break;
    }
    case FFKind::moe:
      moe.validate();
      if (moe.n_experts * moe.expert_size != d_ff)
        throw ConfigError("moe: N_E * G = " + std::to_string(moe.n_experts * moe.expert_size) +
                          " must equal d_ff = " + std::to_string(d_ff));
      break;
  }
}

// ---------------------------------------------------------------- dense / key-value

Tensor dense_mlp_forward(const Tensor& x, const Tensor& w1, const Tensor& w2) {
  if (w1.ndim() != 2 || w2.ndim() != 2 || w2.dim(1) != w1.dim(0) || w2.dim(0) != w1.dim(1))
    throw DimensionError("dense_mlp_forward: W1 " + shape_str(w1.shape()) + " and W2 " + shape_str(w2.shape()) +
                         " are not [d_ff x d_model] / [d_model x d_ff]");
  return linear(relu(linear(x, w1)), w2);
}

Tensor keyvalue_forward(const Tensor& x, const Tensor& keys, const Tensor& values) {
  if (keys.ndim() != 2 || values.ndim() != 2) throw DimensionError("keyvalue_forward: keys/values must be 2-D");
  if (keys.dim(0) != values.dim(0))
    throw DimensionError("keyvalue_forward: " + std::to_string(keys.dim(0)) + " keys but " +
                         std::to_string(values.dim(0)) + " values");
  const std::size_t n = x.rows(), d = x.cols(), pairs = keys.dim(0), d_out = values.dim(1);
  if (keys.dim(1) != d) throw DimensionError("keyvalue_forward: key size does not match input " + shape_str(x.shape()));
  std::vector<real> out(n * d_out, real{0});
  auto xv = x.data();
  auto kv = keys.data();
  auto vv = values.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < pairs; ++i) {
      real alpha = 0;
      for (std::size_t c = 0; c < d; ++c) alpha += kv[i * d + c] * xv[r * d + c];
      if (alpha <= 0) continue;
      for (std::size_t c = 0; c < d_out; ++c) out[r * d_out + c] += alpha * vv[i * d_out + c];
    }
  return Tensor::from({n, d_out}, std::move(out));
}

// ---------------------------------------------------------------- top-K

Tensor topk_activation(const Tensor& u, std::size_t k) {
  const std::size_t n = u.rows(), c = u.cols();
  if (k == 0 || k > c) throw ArgumentError("topk_activation: K=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  if (k == c) return u;
  IndexList keep = argtopk_rows(u, k);
  std::vector<real> mask(n * c, real{0});
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) mask[r * c + keep[r * k + j]] = real{1};
  return mask_mul(u, std::move(mask));
}

namespace {
std::atomic<std::size_t> g_norm_topk_degenerate{0};
}

std::size_t norm_topk_degenerate_count() { return g_norm_topk_degenerate; }

Tensor norm_topk(const Tensor& s, std::size_t k) {
  const std::size_t n = s.rows(), c = s.cols();
  if (k == 0 || k > c) throw ArgumentError("norm_topk: K=" + std::to_string(k) + " outside [1, " + std::to_string(c) + "]");
  IndexList keep = argtopk_rows(s, k);
  auto sv = s.data();
  std::vector<real> out(n * c, real{0}), sums(n, real{0});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) sums[r] += sv[r * c + keep[r * k + j]];
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t col = keep[r * k + j];
      out[r * c + col] = sums[r] != 0 ? sv[r * c + col] / sums[r] : real{1} / static_cast<real>(k);
    }
    if (sums[r] == 0) ++g_norm_topk_degenerate;
  }
  const bool grad = needs_grad({&s});
  Tensor y = Tensor::from(s.shape(), std::move(out), grad);
  if (grad) {
    Tape::current().record("norm_topk", [s, y, keep = std::move(keep), sums = std::move(sums), n, c, k]() mutable {
      if (!y.has_grad()) return;
      auto gy = y.grad();
      auto yv = y.data();
      auto g = s.mutable_grad();
      for (std::size_t r = 0; r < n; ++r) {
        if (sums[r] == 0) continue;
        real dot = 0;
        for (std::size_t j = 0; j < k; ++j) dot += gy[r * c + keep[r * k + j]] * yv[r * c + keep[r * k + j]];
        for (std::size_t j = 0; j < k; ++j) {
          const std::size_t col = keep[r * k + j];
          g[r * c + col] += (gy[r * c + col] - dot) / sums[r];
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------- PKM

IndexList pkm_candidates(std::span<const real> u_a, std::span<const real> u_b, std::size_t k) {
  if (u_a.size() != u_b.size()) throw DimensionError("pkm: sub-key score vectors differ in length");
  const std::size_t n = u_a.size();
  const IndexList top_a = argtopk(u_a, k);
  const IndexList top_b = argtopk(u_b, k);
  IndexList out;
  out.reserve(k * k);
  for (std::size_t ib : top_b)
    for (std::size_t ia : top_a) out.push_back(ib * n + ia);
  return out;
}

IndexList pkm_select(std::span<const real> u_a, std::span<const real> u_b, std::size_t k) {
  const std::size_t n = u_a.size();
  IndexList cand = pkm_candidates(u_a, u_b, k);
  auto score = [&](std::size_t i) { return u_b[i / n] + u_a[i % n]; };
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(),
                    [&](std::size_t a, std::size_t b) {
                      const real sa = score(a), sb = score(b);
                      if (sa != sb) return sa > sb;
                      return a < b;
                    });
  cand.resize(k);
  return cand;
}

Tensor pkm_forward(const Tensor& x, const Tensor& wa, const Tensor& wb, const Tensor& values, std::size_t k,
                   PkmActivation activation) {
  const std::size_t batch = x.rows(), d = x.cols();
  if (d % 2 != 0) throw ConfigError("pkm: d_model must be even");
  const std::size_t n = wa.rows();
  if (wa.shape() != Shape{n, d / 2} || wb.shape() != wa.shape())
    throw DimensionError("pkm: sub-key matrices must be [sqrt(d_ff) x d_model/2], got " + shape_str(wa.shape()) +
                         " and " + shape_str(wb.shape()));
  if (values.rows() != n * n) throw ConfigError("pkm: value count " + std::to_string(values.rows()) + " is not " +
                                                std::to_string(n) + "^2");
  if (k == 0 || k > n) throw ArgumentError("pkm: K must be in [1, sqrt(d_ff)]");

  const Tensor u_a = linear(slice_cols(x, 0, d / 2), wa);
  const Tensor u_b = linear(slice_cols(x, d / 2, d), wb);
  count_macs(static_cast<std::uint64_t>(batch) * k * k);

  IndexList full(batch * k), idx_a(batch * k), idx_b(batch * k);
  for (std::size_t r = 0; r < batch; ++r) {
    const IndexList sel = pkm_select(u_a.data().subspan(r * n, n), u_b.data().subspan(r * n, n), k);
    for (std::size_t j = 0; j < k; ++j) {
      full[r * k + j] = sel[j];
      idx_a[r * k + j] = sel[j] % n;
      idx_b[r * k + j] = sel[j] / n;
    }
  }
  const Tensor scores = add(gather_cols(u_a, idx_a, k), gather_cols(u_b, idx_b, k));
  const Tensor weights = activation == PkmActivation::relu ? relu(scores) : softmax_rows(scores);
  return embedding_bag(values, full, weights);
}

// ---------------------------------------------------------------- MoE

std::vector<std::pair<std::string, Tensor>> ExpertWeights::named() const {
  std::vector<std::pair<std::string, Tensor>> out{{"expert_w1", w1}, {"expert_w2", w2}, {"w3", w3}};
  if (w4.defined()) out.emplace_back("w4", w4);
  return out;
}

Tensor concat_up_projection(const ExpertWeights& w) {
  const std::size_t ne = w.w1.dim(0), d = w.w1.dim(1), g = w.w1.dim(2);
  std::vector<real> out(ne * g * d);
  auto src = w.w1.data();
  for (std::size_t e = 0; e < ne; ++e)
    for (std::size_t m = 0; m < d; ++m)
      for (std::size_t j = 0; j < g; ++j) out[(e * g + j) * d + m] = src[(e * d + m) * g + j];
  return Tensor::from({ne * g, d}, std::move(out));
}

Tensor concat_down_projection(const ExpertWeights& w) {
  const std::size_t ne = w.w2.dim(0), g = w.w2.dim(1), d = w.w2.dim(2);
  std::vector<real> out(d * ne * g);
  auto src = w.w2.data();
  for (std::size_t e = 0; e < ne; ++e)
    for (std::size_t j = 0; j < g; ++j)
      for (std::size_t m = 0; m < d; ++m) out[m * ne * g + e * g + j] = src[(e * g + j) * d + m];
  return Tensor::from({d, ne * g}, std::move(out));
}

std::vector<real> expert_dropout_mask(real delta, std::size_t n_experts, Mode mode, Rng& rng, std::size_t min_keep) {
  std::vector<real> mask(n_experts, real{1});
  if (mode == Mode::eval || delta <= 0) return mask;
  if (delta >= 1) throw ArgumentError("expert dropout rate must be below 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(delta));
  for (int attempt = 0; attempt < 2; ++attempt) {
    std::size_t kept = 0;
    for (auto& m : mask) {
      m = keep(rng) ? real{1} : real{0};
      kept += m != 0;
    }
    if (kept >= min_keep) return mask;
  }
  std::fill(mask.begin(), mask.end(), real{1});
  return mask;
}

Tensor sinkhorn_normalize(const Tensor& scores, std::size_t iters) {
  const std::size_t b = scores.rows(), ne = scores.cols();
  std::vector<real> l(scores.data().begin(), scores.data().end());
  const real ninf = -std::numeric_limits<real>::infinity();
  auto lse = [&](auto&& get, std::size_t count) {
    real mx = ninf;
    for (std::size_t i = 0; i < count; ++i) mx = std::max(mx, get(i));
    if (mx == ninf) return ninf;
    real z = 0;
    for (std::size_t i = 0; i < count; ++i) z += std::exp(get(i) - mx);
    return mx + std::log(z);
  };
  auto normalize_rows = [&] {
    for (std::size_t r = 0; r < b; ++r) {
      const real z = lse([&](std::size_t c) { return l[r * ne + c]; }, ne);
      if (z == ninf) continue;
      for (std::size_t c = 0; c < ne; ++c) l[r * ne + c] -= z;
    }
  };
  const real col_target = std::log(static_cast<real>(b) / static_cast<real>(ne));
  normalize_rows();
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t c = 0; c < ne; ++c) {
      const real z = lse([&](std::size_t r) { return l[r * ne + c]; }, b);
      if (z == ninf) continue;
      for (std::size_t r = 0; r < b; ++r) l[r * ne + c] += col_target - z;
    }
    normalize_rows();
  }
  for (auto& v : l) v = std::exp(v);
  return Tensor::from(scores.shape(), std::move(l));
}

namespace {

// Top-K per row over `keys` with dropped experts excluded.
IndexList topk_with_mask(std::span<const real> keys, std::size_t rows, std::size_t ne, std::size_t k,
                         const std::vector<real>& keep) {
  const real ninf = -std::numeric_limits<real>::infinity();
  std::vector<real> masked(keys.begin(), keys.end());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t e = 0; e < ne; ++e)
      if (keep[e] == 0) masked[r * ne + e] = ninf;
  IndexList out;
  out.reserve(rows * k);
  for (std::size_t r = 0; r < rows; ++r) {
    IndexList row = argtopk(std::span<const real>(masked).subspan(r * ne, ne), k);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

}  // namespace

ExpertSelection select_experts(const Tensor& x, const Tensor& w3, const Tensor& w4, const MoEConfig& cfg, Mode mode,
                               Rng& rng) {
  cfg.validate();
  const std::size_t b = x.rows(), ne = cfg.n_experts, k = cfg.k;
  if (w3.shape() != Shape{ne, x.cols()})
    throw DimensionError("select_experts: W3 " + shape_str(w3.shape()) + " does not match N_E=" + std::to_string(ne) +
                         " and input " + shape_str(x.shape()));
  if (cfg.selection == Selection::noisy_topk && !w4.defined())
    throw ConfigError("select_experts: noisy_topk selection needs the noise matrix W4");

  MacCategory category("selection");
  ExpertSelection sel;
  sel.k = k;
  sel.logits = linear(x, w3);
  sel.dropout = expert_dropout_mask(cfg.expert_dropout, ne, mode, rng, k);

  switch (cfg.selection) {
    case Selection::sigmoid: {
      sel.full_scores = sigmoid(sel.logits);
      sel.indices = topk_with_mask(sel.full_scores.data(), b, ne, k, sel.dropout);
      sel.gates = gather_cols(sel.full_scores, sel.indices, k);
      break;
    }
    case Selection::softmax_topk: {
      sel.full_scores = softmax_rows(sel.logits);
      sel.indices = topk_with_mask(sel.full_scores.data(), b, ne, k, sel.dropout);
      sel.gates = gather_cols(sel.full_scores, sel.indices, k);
      break;
    }
    case Selection::topk_softmax_renorm:
    case Selection::noisy_topk: {
      Tensor logits = sel.logits;
      if (cfg.selection == Selection::noisy_topk && mode == Mode::train) {
        const Tensor noise_scale = softplus(linear(x, w4));
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<real> noise(b * ne);
        for (auto& v : noise) v = static_cast<real>(normal(rng));
        logits = add(logits, mask_mul(noise_scale, std::move(noise)));
      }
      sel.full_scores = softmax_rows(logits);
      sel.indices = topk_with_mask(logits.data(), b, ne, k, sel.dropout);
      // Softmax over the kept logits equals renormalizing the kept softmax
      // probabilities.
      sel.gates = softmax_rows(gather_cols(logits, sel.indices, k));
      break;
    }
    case Selection::sinkhorn: {
      sel.full_scores = sigmoid(sel.logits);
      if (mode == Mode::train) {
        const Tensor balanced = sinkhorn_normalize(sel.logits, cfg.sinkhorn_iters);
        sel.indices = topk_with_mask(balanced.data(), b, ne, k, sel.dropout);
      } else {
        sel.indices = topk_with_mask(sel.full_scores.data(), b, ne, k, sel.dropout);
      }
      sel.gates = gather_cols(sel.full_scores, sel.indices, k);
      break;
    }
  }
  return sel;
}

Tensor regularizer(const ExpertSelection& selection, Regularizer variant, std::size_t n_experts) {
  switch (variant) {
    case Regularizer::none:
      return Tensor::scalar(0);
    case Regularizer::entropy: {
      const Tensor p = mean_axis(softmax_rows(selection.logits), 0);
      return sum(mul(p, log(p)));
    }
    case Regularizer::switch_balance: {
      const Tensor p = mean_axis(softmax_rows(selection.logits), 0);
      const std::size_t b = selection.full_scores.rows();
      const IndexList top1 = argtopk_rows(selection.full_scores, 1);
      std::vector<real> f(n_experts, real{0});
      for (std::size_t e : top1) f[e] += real{1} / static_cast<real>(b);
      return scale(sum(mask_mul(p, std::move(f))), static_cast<real>(n_experts));
    }
    case Regularizer::cv: {
      const Tensor per_token = scatter_cols(normalize_rows(selection.gates), selection.indices, n_experts);
      return cv_squared(sum_axis(per_token, 0));
    }
  }
  throw ArgumentError("regularizer: unknown variant");
}

MoEOutput moe_forward(const Tensor& x, const ExpertWeights& weights, const MoEConfig& cfg, Mode mode, Rng& rng,
                      const MoEForwardOptions& options) {
  cfg.validate();
  const std::size_t b = x.rows(), d = x.cols(), ne = cfg.n_experts, g = cfg.expert_size, k = cfg.k;
  if (weights.w1.shape() != Shape{ne, d, g} || weights.w2.shape() != Shape{ne, g, d})
    throw DimensionError("moe_forward: expert weights " + shape_str(weights.w1.shape()) + " / " +
                         shape_str(weights.w2.shape()) + " do not match N_E=" + std::to_string(ne) +
                         ", G=" + std::to_string(g) + ", d_model=" + std::to_string(d));

  MoEOutput out;
  out.selection = select_experts(x, weights.w3, weights.w4, cfg, mode, rng);
  const ExpertSelection& sel = out.selection;

  IndexList token_of_row(b * k);
  for (std::size_t r = 0; r < b * k; ++r) token_of_row[r] = r / k;
  const Tensor gates = options.unit_gates ? Tensor::full({b * k}, real{1}) : reshape(sel.gates, {b * k});

  const RoutingPlan plan = plan_routing(sel.indices, ne);
  const Tensor rows = gather_rows(x, token_of_row);
  Tensor hidden = relu(cvmm(rows, sel.indices, weights.w1, plan));
  hidden = mul_rows(hidden, gates);
  const Tensor expert_out = cvmm(hidden, sel.indices, weights.w2, plan);
  out.y = scatter_add_rows(expert_out, token_of_row, b);

  {
    MacCategory category("selection");
    out.reg_loss = regularizer(sel, cfg.regularizer, ne);
  }
  out.usage = LayerUsage(ne, k);
  out.usage.record(sel.indices, gates.data());
  return out;
}

ExpertWeights init_moe(const MoEConfig& cfg, std::size_t d_model, std::size_t d_ff, std::size_t n_layers, Rng& rng) {
  cfg.validate();
  if (d_model == 0 || d_ff == 0 || n_layers == 0) throw ConfigError("init_moe: dimensions must be positive");
  const std::size_t ne = cfg.n_experts, g = cfg.expert_size;
  if (ne * g != d_ff) throw ConfigError("init_moe: N_E * G must equal d_ff");
  const real layers = static_cast<real>(n_layers);
  const real up_std = std::sqrt(real{2} / (static_cast<real>(d_model) * layers));

  real w1_std = up_std, w2_std = 0;
  switch (cfg.init) {
    case MoEInit::sigma_moe:
      w2_std = std::sqrt(real{2} / (static_cast<real>(d_ff) * layers));
      break;
    case MoEInit::standard:
      w2_std = std::sqrt(real{2} / (static_cast<real>(g) * layers));
      break;
    case MoEInit::switch_init:
      w1_std = w2_std = std::sqrt(real(0.1) / static_cast<real>(g));
      break;
  }

  ExpertWeights w;
  w.w1 = randn({ne, d_model, g}, w1_std, rng, true);
  w.w2 = randn({ne, g, d_model}, w2_std, rng, true);
  if (cfg.init == MoEInit::sigma_moe) {
    // Unit-norm rows, then one global factor so every row has norm
    // sqrt(d_model) * up_std.
    w.w3 = randn({ne, d_model}, 1, rng, true);
    auto data = w.w3.mutable_data();
    const real target = up_std * std::sqrt(static_cast<real>(d_model));
    for (std::size_t e = 0; e < ne; ++e) {
      real norm = 0;
      for (std::size_t c = 0; c < d_model; ++c) norm += data[e * d_model + c] * data[e * d_model + c];
      norm = std::sqrt(norm);
      for (std::size_t c = 0; c < d_model; ++c) data[e * d_model + c] *= target / norm;
    }
  } else {
    w.w3 = randn({ne, d_model}, up_std, rng, true);
  }
  if (cfg.selection == Selection::noisy_topk) w.w4 = Tensor::zeros({ne, d_model}, true);
  return w;
}

// ---------------------------------------------------------------- FFBlock

FFBlock::FFBlock(FFBlockConfig cfg, std::size_t n_layers, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const real layers = static_cast<real>(n_layers);
  const real up_std = std::sqrt(real{2} / (static_cast<real>(cfg_.d_model) * layers));
  const real down_std = std::sqrt(real{2} / (static_cast<real>(cfg_.d_ff) * layers));
  switch (cfg_.kind) {
    case FFKind::dense:
    case FFKind::topk:
      w1_ = randn({cfg_.d_ff, cfg_.d_model}, up_std, rng, true);
      w2_ = randn({cfg_.d_model, cfg_.d_ff}, down_std, rng, true);
      break;
    case FFKind::pkm: {
      const std::size_t n = cfg_.pkm_subkeys();
      wa_ = randn({n, cfg_.d_model / 2}, up_std, rng, true);
      wb_ = randn({n, cfg_.d_model / 2}, up_std, rng, true);
      values_ = randn({cfg_.d_ff, cfg_.d_model}, down_std, rng, true);
      break;
    }
    case FFKind::moe:
      experts_ = init_moe(cfg_.moe, cfg_.d_model, cfg_.d_ff, n_layers, rng);
      break;
  }
}

FFForward FFBlock::forward(const Tensor& x, Mode mode, Rng& rng, bool trace, const MoEForwardOptions& options) const {
  FFForward out;
  switch (cfg_.kind) {
    case FFKind::dense:
    case FFKind::topk: {
      Tensor u = relu(linear(x, w1_));
      if (cfg_.kind == FFKind::topk) u = topk_activation(u, cfg_.k);
      if (trace) {
        const std::size_t n = u.rows(), c = u.cols();
        auto uv = u.data();
        out.active_units.resize(n);
        for (std::size_t r = 0; r < n; ++r)
          out.active_units[r] = static_cast<std::size_t>(
              std::count_if(uv.begin() + static_cast<std::ptrdiff_t>(r * c),
                            uv.begin() + static_cast<std::ptrdiff_t>((r + 1) * c), [](real v) { return v > 0; }));
      }
      out.y = linear(u, w2_);
      break;
    }
    case FFKind::pkm:
      out.y = pkm_forward(x, wa_, wb_, values_, cfg_.k, cfg_.activation);
      break;
    case FFKind::moe: {
      MoEOutput moe = moe_forward(x, experts_, cfg_.moe, mode, rng, options);
      out.y = moe.y;
      out.reg_loss = moe.reg_loss;
      out.usage = std::move(moe.usage);
      break;
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> FFBlock::parameters() const {
  switch (cfg_.kind) {
    case FFKind::dense:
    case FFKind::topk:
      return {{"w1", w1_}, {"w2", w2_}};
    case FFKind::pkm:
      return {{"wa", wa_}, {"wb", wb_}, {"values", values_}};
    case FFKind::moe:
      return experts_.named();
  }
  return {};
}

std::size_t FFBlock::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

}  // namespace ffx
