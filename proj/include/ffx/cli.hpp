#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "ffx/config.hpp"
#include "ffx/trainer.hpp"

namespace ffx {

struct BenchConfig {
  std::vector<std::size_t> n_experts{8, 16, 32, 64};
  std::vector<std::size_t> expert_sizes{16, 32, 64, 128};
  std::vector<std::size_t> d_models{128};
  std::size_t k = 4;
  std::size_t fixed_n_experts = 16;  // used by the G sweep
  std::size_t fixed_expert_size = 64;  // used by the N_E sweep
  std::size_t tokens = 2048;
  std::size_t repeats = 5;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data_path;  // required by train, eval and analyze
  std::array<double, 3> splits{0.9, 0.05, 0.05};
  std::size_t eval_tokens = 0;  // 0: whole split
  std::string eval_split = "valid";
  std::string reports = "auto";  // analyze: comma list of channels, usage, cooccurrence, resources
  std::uint64_t seed = 1;
  std::size_t threads = 1;
  std::string out = "runs/default";
  std::string checkpoint;  // eval / analyze input; defaults to <out>/checkpoint.ckpt
  BenchConfig bench;
};

// Every setting with its documented default, as "section.key".
const std::vector<Field<RunConfig>>& run_fields();

// Applies values in order; unknown keys throw ConfigError.
void apply_settings(RunConfig& cfg, const KeyValues& values);
std::string run_config_to_text(const RunConfig& cfg);
RunConfig run_config_from_text(std::string_view text);

// Environment overrides: FFX_<SECTION>_<KEY> in upper case, e.g.
// FFX_MOE_N_E=16 or FFX_TRAIN_STEPS=100.
KeyValues environment_settings();

struct BenchRow {
  std::string sweep;  // n_experts, expert_size or d_model
  FFKind kind = FFKind::moe;
  std::size_t d_model = 0, n_experts = 0, expert_size = 0, k = 0, d_ff = 0, tokens = 0;
  double seconds = 0;  // fastest of bench.repeats forward-backward passes
  std::uint64_t ff_macs = 0;
  std::size_t activation_bytes = 0;  // estimate of stored hidden activations
};

// Sweeps N_E at fixed G, G at fixed N_E, and d_model for MoE and dense, timing
// one forward-backward pass of a single feedforward layer per point.
std::vector<BenchRow> run_bench(const RunConfig& cfg, std::ostream& log);
void write_bench_csv(std::ostream& os, const std::vector<BenchRow>& rows);

// Entry point of the ffx tool. Returns the process exit code:
// 0 ok, 2 usage or configuration, 3 data or checkpoint, 4 numerical abort.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ffx
