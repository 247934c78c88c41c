#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dlqat/model.hpp"
#include "dlqat/trainer.hpp"

namespace dlqat {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// INI run configuration. Keys and defaults:
//
//   [model]    d_model=64 n_layers=2 n_heads=4 ffn_hidden=176 context_length=64
//              head_init_gain=2.0 quantize=true
//   [quant]    bits=4 granularity=per-channel|group group_size=16
//              activation_bits=0 (0 disables activation/KV quantization)
//   [train]    setting=5 iters=5000 warmup_sb_iters=1000 lr=2e-4 batch_size=16
//              seed=0 rank=16 alpha=2.0 weight_decay=0.0
//   [data]     corpus= split=0.9
//   [out]      report=report.jsonl pack=model.dlqt
//   [ablation] seeds=5 bits=3,4
//
// Vocabulary is fixed at 256 (byte tokens). group_size is ignored for
// per-channel granularity.
struct RunConfig {
  TinyLMConfig model;
  TrainConfig train;
  std::string corpus_path;
  double split = 0.9;
  std::string report_path = "report.jsonl";
  std::string pack_path = "model.dlqt";
  std::size_t ablation_seeds = 5;
  std::vector<int> ablation_bits = {3, 4};

  RunConfig();
  /// Sets both model initialization and batch-order seeds.
  void set_seed(std::uint64_t seed);
  void validate() const;
  /// Every key with its effective value, grouped by section.
  nlohmann::json to_json() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dlqat
