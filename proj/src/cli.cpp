#include "ffx/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ffx/analysis.hpp"
#include "ffx/autograd.hpp"
#include "ffx/counters.hpp"
#include "ffx/error.hpp"
#include "ffx/parallel.hpp"

namespace fs = std::filesystem;

namespace ffx {

namespace {

using RF = Field<RunConfig>;

template <class M>
RF count_field(std::string key, std::string help, M member) {
  return RF{key, std::move(help), [member](const RunConfig& c) { return std::to_string(member(c)); },
            [key, member](RunConfig& c, const std::string& v) { member(c) = parse_count(key, v); }};
}

template <class M>
RF real_field(std::string key, std::string help, M member) {
  return RF{key, std::move(help), [member](const RunConfig& c) { return format_real(member(c)); },
            [key, member](RunConfig& c, const std::string& v) { member(c) = parse_real(key, v); }};
}

template <class M>
RF text_field(std::string key, std::string help, M member) {
  return RF{key, std::move(help), [member](const RunConfig& c) { return member(c); },
            [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

std::string join_counts(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_counts(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    out.push_back(parse_count(key, item));
  }
  if (out.empty()) throw ConfigError("'" + key + "': expected a comma-separated list of integers");
  return out;
}

template <class M>
RF list_field(std::string key, std::string help, M member) {
  return RF{key, std::move(help), [member](const RunConfig& c) { return join_counts(member(c)); },
            [key, member](RunConfig& c, const std::string& v) { member(c) = parse_counts(key, v); }};
}

std::vector<RF> build_fields() {
  std::vector<RF> f;
  for (const auto& m : model_fields())
    f.push_back(RF{m.key, m.help, [get = m.get](const RunConfig& c) { return get(c.model); },
                   [set = m.set](RunConfig& c, const std::string& v) { set(c.model, v); }});
  f.push_back(count_field("train.steps", "optimizer steps", [](auto& c) -> auto& { return c.train.steps; }));
  f.push_back(real_field("train.lr", "initial learning rate", [](auto& c) -> auto& { return c.train.lr; }));
  f.push_back(count_field("train.warmup_steps", "linear warmup steps (0 disables)",
                          [](auto& c) -> auto& { return c.train.warmup_steps; }));
  f.push_back(real_field("train.clip_norm", "global gradient norm limit",
                         [](auto& c) -> auto& { return c.train.clip_norm; }));
  f.push_back(real_field("train.beta1", "Adam beta1", [](auto& c) -> auto& { return c.train.beta1; }));
  f.push_back(real_field("train.beta2", "Adam beta2", [](auto& c) -> auto& { return c.train.beta2; }));
  f.push_back(real_field("train.eps", "Adam epsilon", [](auto& c) -> auto& { return c.train.eps; }));
  f.push_back(count_field("train.batch_size", "streams per batch", [](auto& c) -> auto& { return c.train.batch; }));
  f.push_back(count_field("train.seq_len", "tokens per stream per step", [](auto& c) -> auto& { return c.train.seq; }));
  f.push_back(count_field("train.checkpoint_every", "steps between checkpoints (0: only at the end)",
                          [](auto& c) -> auto& { return c.train.checkpoint_every; }));
  f.push_back(count_field("train.log_every", "steps between metric rows",
                          [](auto& c) -> auto& { return c.train.log_every; }));
  f.push_back(RF{"train.reg_mean", "average the regularizer over MoE layers instead of summing",
                 [](const RunConfig& c) { return std::string(c.train.reg_mean ? "true" : "false"); },
                 [](RunConfig& c, const std::string& v) { c.train.reg_mean = parse_bool("train.reg_mean", v); }});
  f.push_back(text_field("data.path", "byte corpus file", [](auto& c) -> auto& { return c.data_path; }));
  f.push_back(real_field("data.train_fraction", "leading share of bytes used for training",
                         [](auto& c) -> auto& { return c.splits[0]; }));
  f.push_back(real_field("data.valid_fraction", "share used for validation",
                         [](auto& c) -> auto& { return c.splits[1]; }));
  f.push_back(real_field("data.test_fraction", "trailing share used for test",
                         [](auto& c) -> auto& { return c.splits[2]; }));
  f.push_back(count_field("eval.tokens", "predictions evaluated (0: whole split)",
                          [](auto& c) -> auto& { return c.eval_tokens; }));
  f.push_back(text_field("eval.split", "train | valid | test", [](auto& c) -> auto& { return c.eval_split; }));
  f.push_back(text_field("analyze.reports", "auto or a comma list of channels, usage, cooccurrence, resources",
                         [](auto& c) -> auto& { return c.reports; }));
  f.push_back(RF{"run.seed", "seed for initialization, dropout and expert dropout",
                 [](const RunConfig& c) { return std::to_string(c.seed); },
                 [](RunConfig& c, const std::string& v) { c.seed = parse_count("run.seed", v); }});
  f.push_back(count_field("run.threads", "worker threads (results do not depend on it)",
                          [](auto& c) -> auto& { return c.threads; }));
  f.push_back(text_field("run.out", "output directory", [](auto& c) -> auto& { return c.out; }));
  f.push_back(text_field("run.checkpoint", "checkpoint read by eval and analyze (default <out>/checkpoint.ckpt)",
                         [](auto& c) -> auto& { return c.checkpoint; }));
  f.push_back(list_field("bench.n_experts", "N_E values of the expert-count sweep",
                         [](auto& c) -> auto& { return c.bench.n_experts; }));
  f.push_back(list_field("bench.expert_sizes", "G values of the expert-size sweep",
                         [](auto& c) -> auto& { return c.bench.expert_sizes; }));
  f.push_back(list_field("bench.d_models", "d_model values of the width sweep",
                         [](auto& c) -> auto& { return c.bench.d_models; }));
  f.push_back(count_field("bench.K", "experts per token", [](auto& c) -> auto& { return c.bench.k; }));
  f.push_back(count_field("bench.N_E", "N_E held fixed in the G and width sweeps",
                          [](auto& c) -> auto& { return c.bench.fixed_n_experts; }));
  f.push_back(count_field("bench.G", "G held fixed in the N_E and width sweeps",
                          [](auto& c) -> auto& { return c.bench.fixed_expert_size; }));
  f.push_back(count_field("bench.tokens", "rows per forward-backward pass",
                          [](auto& c) -> auto& { return c.bench.tokens; }));
  f.push_back(count_field("bench.repeats", "timed passes per point (minimum is reported)",
                          [](auto& c) -> auto& { return c.bench.repeats; }));
  return f;
}

std::string env_name(const std::string& key) {
  std::string s = "FFX_";
  for (char ch : key) s += ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  f << text;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot write " + path.string());
  return f;
}

Corpus load_data(const RunConfig& cfg) {
  if (cfg.data_path.empty()) throw ConfigError("data.path is not set; pass --set data.path=FILE");
  return load_corpus(cfg.data_path, cfg.splits);
}

fs::path checkpoint_path(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? fs::path(cfg.out) / "checkpoint.ckpt" : fs::path(cfg.checkpoint);
}

void save_atomic(const fs::path& path, const LMState& state) {
  fs::path tmp = path;
  tmp += ".tmp";
  save_checkpoint(tmp, state);
  fs::rename(tmp, path);
}

nlohmann::json eval_json(const EvalMetrics& e, const std::string& split) {
  return {{"split", split}, {"loss", e.loss}, {"bpc", e.bpc}, {"perplexity", e.perplexity}, {"tokens", e.tokens}};
}

int cmd_train(const RunConfig& cfg, std::ostream& out) {
  const Corpus corpus = load_data(cfg);
  fs::create_directories(cfg.out);
  write_file(fs::path(cfg.out) / "config.ini", run_config_to_text(cfg));

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  Rng init(cfg.seed);
  LMState state(cfg.model, init);
  out << "parameters: " << state.parameter_count() << '\n';

  std::ofstream metrics = open_out(fs::path(cfg.out) / "metrics.csv");
  MetricsWriter writer(metrics, state, num_threads(), cfg.seed);
  TrainHooks hooks;
  hooks.on_log = [&](const StepMetrics& m) {
    writer.write(m);
    out << "step " << m.step << " loss " << format_real(m.loss) << " bpc " << format_real(m.bpc) << '\n';
  };
  hooks.on_checkpoint = [&](const LMState& s) { save_atomic(fs::path(cfg.out) / "checkpoint.ckpt", s); };
  train(state, corpus, tc, hooks);

  const EvalMetrics e = evaluate(state, corpus, SplitName::valid, tc.seq, tc.batch, cfg.eval_tokens);
  write_file(fs::path(cfg.out) / "summary.json", eval_json(e, "valid").dump(2) + "\n");
  out << "valid bpc " << format_real(e.bpc) << '\n';
  return 0;
}

int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const LMState state = load_checkpoint(checkpoint_path(cfg), cfg.model);
  const Corpus corpus = load_data(cfg);
  const SplitName split = parse_split(cfg.eval_split);
  const EvalMetrics e = evaluate(state, corpus, split, cfg.train.seq, cfg.train.batch, cfg.eval_tokens);
  fs::create_directories(cfg.out);
  write_file(fs::path(cfg.out) / "eval.json", eval_json(e, cfg.eval_split).dump(2) + "\n");
  out << cfg.eval_split << " loss " << format_real(e.loss) << " bpc " << format_real(e.bpc) << " ppl "
      << format_real(e.perplexity) << '\n';
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

int cmd_analyze(const RunConfig& cfg, std::ostream& out) {
  const FFKind kind = cfg.model.ff.kind;
  std::vector<std::string> reports;
  if (cfg.reports == "auto") {
    reports.push_back("resources");
    if (kind == FFKind::dense || kind == FFKind::topk) reports.push_back("channels");
    if (kind == FFKind::moe) reports.push_back("usage");
    if (kind == FFKind::moe && cfg.model.ff.moe.k >= 2) reports.push_back("cooccurrence");
  } else {
    reports = split_list(cfg.reports);
  }
  for (auto& r : reports) {
    if (r == "expert_usage") r = "usage";
    if (r != "resources" && r != "channels" && r != "usage" && r != "cooccurrence")
      throw ConfigError("analyze.reports: unknown report '" + r + "' (expected channels, usage, cooccurrence, resources)");
    if ((r == "usage" || r == "cooccurrence") && kind != FFKind::moe)
      throw ConfigError("analyze.reports: '" + r + "' needs ff.kind = moe, the model uses " +
                        std::string(to_string(kind)));
    if (r == "channels" && kind != FFKind::dense && kind != FFKind::topk)
      throw ConfigError("analyze.reports: 'channels' needs ff.kind = dense or topk, the model uses " +
                        std::string(to_string(kind)));
  }

  fs::create_directories(cfg.out);
  const fs::path dir(cfg.out);
  auto wants = [&](const char* r) { return std::find(reports.begin(), reports.end(), r) != reports.end(); };
  if (wants("resources")) {
    const ResourceReport r = flops_memory_report(cfg.model.ff);
    auto csv = open_out(dir / "resources.csv");
    write_resource_csv(csv, {r});
    auto jsonl = open_out(dir / "resources.jsonl");
    write_resource_jsonl(jsonl, {r});
    out << "ff flops ratio " << format_real(r.flops_ratio) << " memory ratio " << format_real(r.memory_ratio) << '\n';
  }
  if (!wants("channels") && !wants("usage") && !wants("cooccurrence")) return 0;

  const LMState state = load_checkpoint(checkpoint_path(cfg), cfg.model);
  const Corpus corpus = load_data(cfg);
  const SplitName split = parse_split(cfg.eval_split);
  if (wants("channels")) {
    const ChannelCounts c =
        active_channel_count(state, corpus, split, cfg.train.seq, cfg.train.batch, cfg.eval_tokens);
    auto csv = open_out(dir / "channels.csv");
    write_channels_csv(csv, c);
    for (std::size_t l = 0; l < c.mean.size(); ++l)
      out << "layer " << l << " active channels " << format_real(c.mean[l]) << " +- " << format_real(c.stddev[l])
          << '\n';
  }
  if (wants("usage") || wants("cooccurrence")) {
    const auto usage = collect_usage(state, corpus, split, cfg.train.seq, cfg.train.batch, cfg.eval_tokens);
    if (wants("usage")) {
      std::vector<std::vector<double>> shares;
      for (const auto& u : usage) shares.push_back(expert_usage(u, true));
      auto csv = open_out(dir / "usage.csv");
      write_usage_csv(csv, shares);
      for (std::size_t l = 0; l < shares.size(); ++l)
        out << "layer " << l << " max expert share " << format_real(shares[l].front()) << '\n';
    }
    if (wants("cooccurrence")) {
      auto jsonl = open_out(dir / "cooccurrence.jsonl");
      write_cooccurrence_jsonl(jsonl, usage);
    }
  }
  return 0;
}

// One timed forward-backward pass.
double time_pass(const FFBlock& block, const Tensor& x, Rng& rng) {
  for (const auto& [n, t] : block.parameters()) Tensor(t).clear_grad();
  Tape::current().clear();
  const auto start = std::chrono::steady_clock::now();
  FFForward f = block.forward(x, Mode::train, rng);
  backward(sum(f.y));
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  Tape::current().clear();
  return s;
}

}  // namespace

const std::vector<Field<RunConfig>>& run_fields() {
  static const std::vector<RF> fields = build_fields();
  return fields;
}

void apply_settings(RunConfig& cfg, const KeyValues& values) {
  for (const auto& [key, value] : values) {
    auto it = std::find_if(run_fields().begin(), run_fields().end(), [&](const RF& f) { return f.key == key; });
    if (it == run_fields().end()) throw ConfigError("unknown setting '" + key + "'");
    it->set(cfg, value);
  }
}

std::string run_config_to_text(const RunConfig& cfg) {
  KeyValues kv;
  for (const auto& f : run_fields()) kv[f.key] = f.get(cfg);
  return format_ini(kv);
}

RunConfig run_config_from_text(std::string_view text) {
  RunConfig cfg;
  apply_settings(cfg, parse_ini(text));
  return cfg;
}

KeyValues environment_settings() {
  KeyValues kv;
  for (const auto& f : run_fields())
    if (const char* v = std::getenv(env_name(f.key).c_str())) kv[f.key] = v;
  return kv;
}

std::vector<BenchRow> run_bench(const RunConfig& cfg, std::ostream& log) {
  const BenchConfig& b = cfg.bench;
  struct Point {
    BenchRow row;
    FFBlock block;
    Tensor x;
  };
  std::vector<Point> points;
  auto add = [&](const char* sweep, FFKind kind, std::size_t d, std::size_t ne, std::size_t g) {
    FFBlockConfig fc;
    fc.kind = kind;
    fc.d_model = d;
    fc.d_ff = ne * g;
    fc.moe.n_experts = ne;
    fc.moe.expert_size = g;
    fc.moe.k = std::min(b.k, ne);
    fc.moe.expert_dropout = 0;
    fc.validate();
    Rng rng(cfg.seed);
    FFBlock block(fc, 1, rng);
    Tensor x = randn({b.tokens, d}, 1, rng);
    MacCounter counter;
    {
      MacCountingScope scope(counter);
      NoGradGuard guard;
      block.forward(x, Mode::eval, rng);
    }
    BenchRow r;
    r.sweep = sweep;
    r.kind = kind;
    r.d_model = d;
    r.n_experts = kind == FFKind::moe ? ne : 0;
    r.expert_size = kind == FFKind::moe ? g : 0;
    r.k = kind == FFKind::moe ? fc.moe.k : 0;
    r.d_ff = fc.d_ff;
    r.tokens = b.tokens;
    r.seconds = 1e300;
    r.ff_macs = counter.get("ff");
    // Stored activations per token: dense keeps u before and after the relu;
    // MoE keeps scores, K copies of x, and K expert hidden vectors twice.
    const std::size_t per_token = kind == FFKind::moe ? ne + fc.moe.k * d + 2 * fc.moe.k * g : 2 * fc.d_ff;
    r.activation_bytes = per_token * b.tokens * sizeof(real);
    points.push_back(Point{r, std::move(block), x});
  };
  const std::size_t d0 = b.d_models.front();
  for (std::size_t ne : b.n_experts) add("n_experts", FFKind::moe, d0, ne, b.fixed_expert_size);
  for (std::size_t g : b.expert_sizes) add("expert_size", FFKind::moe, d0, b.fixed_n_experts, g);
  for (std::size_t d : b.d_models) {
    add("d_model", FFKind::moe, d, b.fixed_n_experts, b.fixed_expert_size);
    add("d_model", FFKind::dense, d, b.fixed_n_experts, b.fixed_expert_size);
  }

  // Repeats go round-robin over all points so that slow drifts in machine load
  // hit every point alike instead of showing up as a trend along a sweep.
  // Pass 0 only warms caches.
  Rng rng(0);
  for (std::size_t rep = 0; rep <= b.repeats; ++rep)
    for (Point& p : points) {
      const double s = time_pass(p.block, p.x, rng);
      if (rep > 0) p.row.seconds = std::min(p.row.seconds, s);
    }

  std::vector<BenchRow> rows;
  for (const Point& p : points) {
    const BenchRow& r = p.row;
    log << r.sweep << ' ' << to_string(r.kind) << " d=" << r.d_model << " N_E=" << r.n_experts << " G="
        << r.expert_size << ": " << r.seconds * 1e3 << " ms\n";
    rows.push_back(r);
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "sweep,kind,d_model,N_E,G,K,d_ff,tokens,seconds,ff_macs,activation_bytes\n";
  for (const auto& r : rows)
    os << r.sweep << ',' << to_string(r.kind) << ',' << r.d_model << ',' << r.n_experts << ',' << r.expert_size << ','
       << r.k << ',' << r.d_ff << ',' << r.tokens << ',' << format_real(r.seconds) << ',' << r.ff_macs << ','
       << r.activation_bytes << '\n';
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse feedforward language-model experiments"};
  app.name("ffx");
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_file, seed, out_dir, steps, checkpoint;
  std::vector<std::string> sets;
  bool print_config = false;
  app.add_option("--config", config_file, "key-value config file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override one setting, key=value (repeatable)");
  app.add_option("--seed", seed, "run.seed");
  app.add_option("--out", out_dir, "run.out");
  app.add_option("--steps", steps, "train.steps");
  app.add_option("--checkpoint", checkpoint, "run.checkpoint");
  app.add_flag("--print-config", print_config, "print the effective config and exit");
  auto* train_cmd = app.add_subcommand("train", "train a model, writing metrics.csv and checkpoint.ckpt");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on eval.split");
  auto* bench_cmd = app.add_subcommand("bench", "time single-layer forward-backward passes");
  auto* analyze_cmd = app.add_subcommand("analyze", "channel, expert-usage and resource reports");
  app.footer("Settings (also FFX_<SECTION>_<KEY> environment variables):\n" + [] {
    std::string s;
    for (const auto& f : run_fields()) s += "  " + f.key + "  " + f.help + "\n";
    return s;
  }());

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) {
      std::ifstream f(config_file);
      std::stringstream ss;
      ss << f.rdbuf();
      apply_settings(cfg, parse_ini(ss.str()));
    }
    apply_settings(cfg, environment_settings());
    KeyValues overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (!seed.empty()) overrides["run.seed"] = seed;
    if (!out_dir.empty()) overrides["run.out"] = out_dir;
    if (!steps.empty()) overrides["train.steps"] = steps;
    if (!checkpoint.empty()) overrides["run.checkpoint"] = checkpoint;
    apply_settings(cfg, overrides);

    if (print_config) {
      out << run_config_to_text(cfg);
      return 0;
    }
    cfg.model.validate();
    cfg.train.validate();
    if (cfg.threads == 0) throw ConfigError("run.threads must be at least 1");
    set_num_threads(cfg.threads);

    if (*train_cmd) return cmd_train(cfg, out);
    if (*eval_cmd) return cmd_eval(cfg, out);
    if (*analyze_cmd) return cmd_analyze(cfg, out);
    if (*bench_cmd) {
      fs::create_directories(cfg.out);
      const auto rows = run_bench(cfg, out);
      auto csv = open_out(fs::path(cfg.out) / "bench.csv");
      write_bench_csv(csv, rows);
      return 0;
    }
    return 2;
  } catch (const ConfigError& e) {
    err << "ffx: " << e.what() << '\n';
    return 2;
  } catch (const ArgumentError& e) {
    err << "ffx: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    err << "ffx: " << e.what() << '\n';
    return 3;
  } catch (const VersionError& e) {
    err << "ffx: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    err << "ffx: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "ffx: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace ffx
