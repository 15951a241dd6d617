#include "ffx/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include "ffx/error.hpp"

namespace ffx {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

int section_rank(const std::string& section) {
  static const std::vector<std::string> order{"model", "ff", "moe", "train", "data", "run"};
  auto it = std::find(order.begin(), order.end(), section);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

}  // namespace

KeyValues parse_ini(std::string_view text) {
  KeyValues out;
  std::string section;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('\n', pos), text.size());
    const std::string line = trim(text.substr(pos, end - pos));
    pos = end + 1;
    ++line_no;
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": missing key");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": key '" + key + "' appears before any section");
    const std::string full = section + "." + key;
    if (!out.emplace(full, trim(std::string_view(line).substr(eq + 1))).second)
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + full + "'");
  }
  return out;
}

std::string format_ini(const KeyValues& values) {
  std::vector<std::pair<std::string, std::string>> items(values.begin(), values.end());
  auto section_of = [](const std::string& k) { return k.substr(0, k.find('.')); };
  std::stable_sort(items.begin(), items.end(), [&](const auto& a, const auto& b) {
    const std::string sa = section_of(a.first), sb = section_of(b.first);
    const int ra = section_rank(sa), rb = section_rank(sb);
    if (ra != rb) return ra < rb;
    return sa < sb;
  });
  std::ostringstream os;
  std::string current;
  for (const auto& [key, value] : items) {
    const std::string section = section_of(key);
    if (section != current) {
      if (!current.empty()) os << '\n';
      os << '[' << section << "]\n";
      current = section;
    }
    os << key.substr(section.size() + 1) << " = " << value << '\n';
  }
  return os.str();
}

std::string format_real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_real(const std::string& key, const std::string& text) {
  double v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size() || !std::isfinite(v))
    throw ConfigError("'" + key + "': expected a number, got '" + text + "'");
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  std::size_t v = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc() || res.ptr != text.data() + text.size())
    throw ConfigError("'" + key + "': expected a non-negative integer, got '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + text + "'");
}

const std::vector<Field<ModelConfig>>& model_fields() {
  using F = Field<ModelConfig>;
  auto count = [](std::string key, std::string help, std::size_t ModelConfig::*member) {
    return F{key, std::move(help), [member](const ModelConfig& c) { return std::to_string(c.*member); },
             [key, member](ModelConfig& c, const std::string& v) { c.*member = parse_count(key, v); }};
  };
  auto ff_count = [](std::string key, std::string help, std::size_t FFBlockConfig::*member) {
    return F{key, std::move(help), [member](const ModelConfig& c) { return std::to_string(c.ff.*member); },
             [key, member](ModelConfig& c, const std::string& v) { c.ff.*member = parse_count(key, v); }};
  };
  auto moe_count = [](std::string key, std::string help, std::size_t MoEConfig::*member) {
    return F{key, std::move(help), [member](const ModelConfig& c) { return std::to_string(c.ff.moe.*member); },
             [key, member](ModelConfig& c, const std::string& v) { c.ff.moe.*member = parse_count(key, v); }};
  };
  auto moe_real = [](std::string key, std::string help, real MoEConfig::*member) {
    return F{key, std::move(help), [member](const ModelConfig& c) { return format_real(c.ff.moe.*member); },
             [key, member](ModelConfig& c, const std::string& v) {
               c.ff.moe.*member = static_cast<real>(parse_real(key, v));
             }};
  };

  static const std::vector<F> fields{
      count("model.vocab_size", "vocabulary size (256 for bytes)", &ModelConfig::vocab_size),
      F{"model.d_model", "residual width",
        [](const ModelConfig& c) { return std::to_string(c.d_model); },
        [](ModelConfig& c, const std::string& v) {
          c.d_model = parse_count("model.d_model", v);
          c.ff.d_model = c.d_model;
        }},
      count("model.n_layers", "transformer blocks", &ModelConfig::n_layers),
      count("model.n_heads", "attention heads", &ModelConfig::n_heads),
      count("model.head_size", "width of one attention head", &ModelConfig::head_size),
      count("model.context_size", "maximum sequence length", &ModelConfig::context_len),
      F{"model.dropout", "dropout on attention probabilities and residual branches",
        [](const ModelConfig& c) { return format_real(c.dropout); },
        [](ModelConfig& c, const std::string& v) { c.dropout = static_cast<real>(parse_real("model.dropout", v)); }},
      F{"ff.kind", "dense | topk | pkm | moe", [](const ModelConfig& c) { return std::string(to_string(c.ff.kind)); },
        [](ModelConfig& c, const std::string& v) { c.ff.kind = parse_ff_kind(v); }},
      ff_count("ff.d_ff", "hidden width of the feedforward block", &FFBlockConfig::d_ff),
      ff_count("ff.K", "kept channels for topk, kept keys for pkm", &FFBlockConfig::k),
      F{"ff.pkm_activation", "relu | softmax",
        [](const ModelConfig& c) { return std::string(to_string(c.ff.activation)); },
        [](ModelConfig& c, const std::string& v) { c.ff.activation = parse_pkm_activation(v); }},
      moe_count("moe.N_E", "number of experts", &MoEConfig::n_experts),
      moe_count("moe.G", "expert size", &MoEConfig::expert_size),
      moe_count("moe.K", "experts per token", &MoEConfig::k),
      F{"moe.selection", "sigmoid | softmax_topk | topk_softmax_renorm | noisy_topk | sinkhorn",
        [](const ModelConfig& c) { return std::string(to_string(c.ff.moe.selection)); },
        [](ModelConfig& c, const std::string& v) { c.ff.moe.selection = parse_selection(v); }},
      F{"moe.regularizer", "entropy | switch | cv | none",
        [](const ModelConfig& c) { return std::string(to_string(c.ff.moe.regularizer)); },
        [](ModelConfig& c, const std::string& v) { c.ff.moe.regularizer = parse_regularizer(v); }},
      moe_real("moe.gamma", "regularizer weight", &MoEConfig::gamma),
      moe_real("moe.delta", "expert dropout rate", &MoEConfig::expert_dropout),
      F{"moe.init", "sigma_moe | standard | switch",
        [](const ModelConfig& c) { return std::string(to_string(c.ff.moe.init)); },
        [](ModelConfig& c, const std::string& v) { c.ff.moe.init = parse_moe_init(v); }},
      moe_count("moe.sinkhorn_iters", "Sinkhorn rounds for sinkhorn selection", &MoEConfig::sinkhorn_iters),
  };
  return fields;
}

std::string model_config_to_text(const ModelConfig& cfg) {
  KeyValues kv;
  for (const auto& f : model_fields()) kv[f.key] = f.get(cfg);
  return format_ini(kv);
}

ModelConfig model_config_from_text(std::string_view text) {
  ModelConfig cfg;
  cfg.ff.d_model = cfg.d_model;
  const KeyValues kv = parse_ini(text);
  for (const auto& [key, value] : kv) {
    auto it = std::find_if(model_fields().begin(), model_fields().end(), [&](const auto& f) { return f.key == key; });
    if (it == model_fields().end()) throw ConfigError("unknown model setting '" + key + "'");
    it->set(cfg, value);
  }
  return cfg;
}

}  // namespace ffx
