#include "ffx/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "ffx/autograd.hpp"
#include "ffx/config.hpp"
#include "ffx/error.hpp"

namespace ffx {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || head_size == 0)
    throw ConfigError("model: vocab_size, d_model, n_layers, n_heads and head_size must be positive");
  if (context_len == 0) throw ConfigError("model: context_size must be at least 1");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("model: dropout must be in [0, 1)");
  if (ff.d_model != d_model)
    throw ConfigError("model: ff block width " + std::to_string(ff.d_model) + " differs from d_model " +
                      std::to_string(d_model));
  ff.validate();
}

bool ModelConfig::operator==(const ModelConfig& o) const { return model_config_to_text(*this) == model_config_to_text(o); }

namespace {

std::size_t ff_parameter_count(const FFBlockConfig& ff) {
  switch (ff.kind) {
    case FFKind::dense:
    case FFKind::topk:
      return 2 * ff.d_model * ff.d_ff;
    case FFKind::pkm:
      return ff.pkm_subkeys() * ff.d_model + ff.d_ff * ff.d_model;
    case FFKind::moe: {
      const std::size_t selection = ff.moe.n_experts * ff.d_model;
      return 2 * ff.d_model * ff.d_ff + selection * (ff.moe.selection == Selection::noisy_topk ? 2 : 1);
    }
  }
  return 0;
}

}  // namespace

std::size_t parameter_count(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model, hd = cfg.n_heads * cfg.head_size, v = cfg.vocab_size;
  const std::size_t per_layer = 4 * d + 3 * hd * d + 3 * hd + d * hd + d + ff_parameter_count(cfg.ff);
  return v * d + cfg.n_layers * per_layer + 2 * d + v * d + v;
}

LMState::LMState(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model, hd = cfg_.n_heads * cfg_.head_size, v = cfg_.vocab_size;
  const real layers = static_cast<real>(cfg_.n_layers);
  auto ones = [](std::size_t n) { return Tensor::full({n}, real{1}, true); };
  auto zeros = [](std::size_t n) { return Tensor::zeros({n}, true); };

  embed_ = randn({v, d}, real{1}, rng, true);
  params_.emplace_back("embed.weight", embed_);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Tensor qkv = randn({3 * hd, d}, std::sqrt(real{2} / (static_cast<real>(d) * layers)), rng, true);
    Tensor proj = randn({d, hd}, std::sqrt(real{2} / (static_cast<real>(hd) * layers)), rng, true);
    layers_.push_back(Layer{ones(d), zeros(d), qkv, zeros(3 * hd), proj, zeros(d), ones(d), zeros(d),
                            FFBlock(cfg_.ff, cfg_.n_layers, rng)});
    const Layer& L = layers_.back();
    params_.emplace_back(p + "ln1.gain", L.ln1_gain);
    params_.emplace_back(p + "ln1.bias", L.ln1_bias);
    params_.emplace_back(p + "attn.qkv.weight", L.qkv_weight);
    params_.emplace_back(p + "attn.qkv.bias", L.qkv_bias);
    params_.emplace_back(p + "attn.proj.weight", L.proj_weight);
    params_.emplace_back(p + "attn.proj.bias", L.proj_bias);
    params_.emplace_back(p + "ln2.gain", L.ln2_gain);
    params_.emplace_back(p + "ln2.bias", L.ln2_bias);
    for (const auto& [name, t] : L.ff.parameters()) params_.emplace_back(p + "ff." + name, t);
  }
  ln_f_gain_ = ones(d);
  ln_f_bias_ = zeros(d);
  out_weight_ = randn({v, d}, std::sqrt(real{1} / static_cast<real>(d)), rng, true);
  out_bias_ = zeros(v);
  params_.emplace_back("ln_f.gain", ln_f_gain_);
  params_.emplace_back("ln_f.bias", ln_f_bias_);
  params_.emplace_back("out.weight", out_weight_);
  params_.emplace_back("out.bias", out_bias_);
}

Tensor LMState::parameter(const std::string& name) const {
  for (const auto& [n, t] : params_)
    if (n == name) return t;
  throw ArgumentError("no parameter named '" + name + "'");
}

std::size_t LMState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

struct LMForwardAccess {
  static LMOutput run(const IndexList& tokens, std::size_t batch, std::size_t time, const LMState& s, Mode mode,
                      Rng& rng, bool trace) {
    const ModelConfig& cfg = s.cfg_;
    if (batch == 0 || time == 0) throw ArgumentError("lm_forward: empty batch");
    if (tokens.size() != batch * time)
      throw DimensionError("lm_forward: " + std::to_string(tokens.size()) + " tokens for a " + std::to_string(batch) +
                           "x" + std::to_string(time) + " batch");
    if (time > cfg.context_len)
      throw ArgumentError("lm_forward: sequence length " + std::to_string(time) + " exceeds context size " +
                          std::to_string(cfg.context_len));
    for (std::size_t t : tokens)
      if (t >= cfg.vocab_size)
        throw DataError("lm_forward: token id " + std::to_string(t) + " outside vocabulary of " +
                        std::to_string(cfg.vocab_size));

    const std::size_t d = cfg.d_model, hd = cfg.n_heads * cfg.head_size;
    const bool train = mode == Mode::train;
    const real p = train ? cfg.dropout : real{0};

    std::vector<real> pos(batch * time * d);
    for (std::size_t t = 0; t < time; ++t)
      for (std::size_t i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(t) * freq;
        for (std::size_t b = 0; b < batch; ++b) {
          real* row = pos.data() + (b * time + t) * d;
          row[i] = static_cast<real>(std::sin(angle));
          if (i + 1 < d) row[i + 1] = static_cast<real>(std::cos(angle));
        }
      }

    LMOutput out;
    Tensor x = add(embedding(s.embed_, tokens), Tensor::from({batch * time, d}, std::move(pos)));
    out.total_reg = Tensor::scalar(0);
    const AttentionShape dims{batch, time, cfg.n_heads, cfg.head_size};
    for (const auto& L : s.layers_) {
      Tensor h = layernorm(x, L.ln1_gain, L.ln1_bias);
      auto qkv = split_cols(add_bias(linear(h, L.qkv_weight), L.qkv_bias), {hd, hd, hd});
      Tensor a = causal_attention(qkv[0], qkv[1], qkv[2], dims, p, train ? &rng : nullptr);
      a = add_bias(linear(a, L.proj_weight), L.proj_bias);
      x = add(x, dropout(a, p, rng));

      h = layernorm(x, L.ln2_gain, L.ln2_bias);
      FFForward f = L.ff.forward(h, mode, rng, trace, s.moe_options);
      x = add(x, dropout(f.y, p, rng));
      if (f.reg_loss.defined()) {
        out.layer_reg.push_back(f.reg_loss);
        out.total_reg = add(out.total_reg, scale(f.reg_loss, cfg.ff.moe.gamma));
      }
      out.usage.push_back(std::move(f.usage));
      out.active_units.push_back(std::move(f.active_units));
    }
    x = layernorm(x, s.ln_f_gain_, s.ln_f_bias_);
    out.logits = reshape(add_bias(linear(x, s.out_weight_), s.out_bias_), {batch, time, cfg.vocab_size});
    return out;
  }
};

LMOutput lm_forward(const IndexList& tokens, std::size_t batch, std::size_t time, const LMState& state, Mode mode,
                    Rng& rng, bool trace) {
  return LMForwardAccess::run(tokens, batch, time, state, mode, rng, trace);
}

Tensor lm_loss(const Tensor& logits, const IndexList& targets) {
  const std::size_t v = logits.shape().back();
  if (logits.numel() != targets.size() * v)
    throw DimensionError("lm_loss: logits " + shape_str(logits.shape()) + " do not match " +
                         std::to_string(targets.size()) + " targets");
  return cross_entropy(reshape(logits, {targets.size(), v}), targets);
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'F', 'X', 'C', 'K', 'P', 'T', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(const std::string& buf, std::size_t end) : buf_(buf), end_(end) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::size_t n) const {
    if (end_ - pos_ < n) throw VersionError("checkpoint is truncated");
  }
  const std::string& buf_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const LMState& state) {
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, kVersion);
  const std::string text = model_config_to_text(state.config());
  put<std::uint64_t>(buf, text.size());
  buf += text;
  put<std::uint64_t>(buf, state.step);
  put<std::uint64_t>(buf, state.parameters().size());
  for (const auto& [name, t] : state.parameters()) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.ndim()));
    for (std::size_t extent : t.shape()) put<std::uint64_t>(buf, extent);
    for (real v : t.data()) put<double>(buf, static_cast<double>(v));
  }
  put<std::uint64_t>(buf, fnv1a(buf.data(), buf.size()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

LMState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw VersionError(path.string() + " is not a checkpoint (bad magic)");
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof stored);
  if (stored != fnv1a(buf.data(), body)) throw VersionError(path.string() + ": checksum mismatch (file is corrupt)");

  Reader r(buf, body);
  r.bytes(sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion)
    throw VersionError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  ModelConfig cfg;
  try {
    cfg = model_config_from_text(r.bytes(r.get<std::uint64_t>()));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw VersionError(path.string() + ": stored config is not understood: " + e.what());
  }
  Rng rng(0);
  LMState state(cfg, rng);
  state.step = r.get<std::uint64_t>();
  const auto count = r.get<std::uint64_t>();
  if (count != state.parameters().size())
    throw VersionError(path.string() + ": holds " + std::to_string(count) + " tensors, model has " +
                       std::to_string(state.parameters().size()));
  std::set<std::string> seen;
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.get<std::uint32_t>());
    if (!seen.insert(name).second) throw VersionError(path.string() + ": tensor '" + name + "' stored twice");
    Shape shape(r.get<std::uint32_t>());
    for (auto& e : shape) e = r.get<std::uint64_t>();
    Tensor t;
    try {
      t = state.parameter(name);
    } catch (const ArgumentError&) {
      throw VersionError(path.string() + ": unexpected tensor '" + name + "'");
    }
    if (t.shape() != shape)
      throw VersionError(path.string() + ": tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                         shape_str(t.shape()));
    for (auto& v : t.mutable_data()) v = static_cast<real>(r.get<double>());
  }
  if (!r.done()) throw VersionError(path.string() + ": trailing bytes after the last tensor");
  return state;
}

LMState load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  LMState s = load_checkpoint(path);
  if (!(s.config() == expected))
    throw VersionError(path.string() + ": checkpoint was written for a different model config\n--- checkpoint\n" +
                       model_config_to_text(s.config()) + "--- requested\n" + model_config_to_text(expected));
  return s;
}

}  // namespace ffx
