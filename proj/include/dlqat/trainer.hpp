#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlqat/adapter.hpp"
#include "dlqat/corpus.hpp"
#include "dlqat/model.hpp"
#include "dlqat/optim.hpp"

namespace dlqat {

/// Loop hyperparameters. Quantizer, rank and ablation setting belong to the
/// model (TinyLMConfig) and are read from it.
struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 2e-4;
  std::size_t total_iters = 5000;
  std::size_t warmup_sb_iters = 1000;
  std::uint64_t seed = 0;
  AdamWOptions adamw;
  /// Evaluate perplexity before the first step as well as after the last.
  bool eval_initial = true;
  /// Record which parameter groups changed at every iteration.
  bool track_changes = true;
  /// Stops after this many iterations without altering the schedule, so a
  /// short rerun reproduces a prefix of a longer one.
  std::optional<std::size_t> stop_after;

  void validate(AblationSetting setting) const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t iter, const std::string& what)
      : std::runtime_error("diverged at iteration " + std::to_string(iter) + ": " + what),
        iteration(iter) {}
  std::size_t iteration;
};

/// Parameter groups tracked by fingerprint: "W0", "s", "b", "m", "A", "B",
/// "embed", "head". Derived MinMax s, b are not parameters and are skipped.
using Fingerprints = std::map<std::string, std::uint64_t>;
Fingerprints fingerprint_model(TinyLM& model);

struct IterationRecord {
  std::size_t iter = 0;  // 1-based
  Phase phase = Phase::Main;
  double loss = 0.0;
  /// L2 norm of the gradient per trainable kind ("s", "b", "m", "A", "B").
  std::map<std::string, double> grad_norms;
  /// Fingerprint groups whose bytes changed during this iteration.
  std::vector<std::string> changed;
  /// Trainable groups whose accumulated first moment is nonzero after the
  /// step; exactly these can move under AdamW.
  std::vector<std::string> active;
};

struct TrainingReport {
  std::vector<IterationRecord> records;
  std::size_t warmup_iters = 0;
  std::optional<Perplexity> initial_eval;
  Perplexity final_eval;
  /// For learn-then-fix settings: s, b fingerprints unchanged from the end
  /// of warm-up to the end of training.
  std::optional<bool> sb_frozen_constant;
  double elapsed_seconds = 0.0;
  double seconds_per_iter = 0.0;
};

/// Two-phase schedule. Iterations 1..warmup train only s, b (settings with
/// a warm-up); learn-then-fix settings then freeze them as s0, b0 and the
/// optimizer restarts with fresh moments for the main-phase set.
TrainingReport run_training(TinyLM& model, const Corpus& data, const TrainConfig& config);

/// Batch of `batch` windows of `seq_len + 1` consecutive training bytes.
struct Batch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
};
Batch sample_batch(std::span<const std::int32_t> train, std::size_t batch, std::size_t seq_len,
                   std::mt19937_64& rng);

struct AblationRow {
  AblationSetting setting = AblationSetting::S5;
  int bits = 4;
  std::vector<double> final_losses;  // eval NLL per seed
  std::vector<double> final_ppls;
  double mean_loss = 0.0;
  double std_loss = 0.0;
  double mean_ppl = 0.0;
  double std_ppl = 0.0;
  /// Learn-then-fix rows only: s, b stayed bitwise fixed after warm-up in
  /// every seed.
  std::optional<bool> sb_frozen_constant;
};

struct AblationReport {
  std::vector<int> bits;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // settings 1-6 for each bit-width
  /// Directional checks at 3 bits (empty if 3 bits was not run).
  std::optional<bool> s5_le_s1;
  std::optional<bool> s5_le_s2;

  const AblationRow& row(AblationSetting setting, int bits) const;
  /// Human-readable table with the ablation columns.
  std::string table() const;
};

using ModelFactory = std::function<TinyLM(AblationSetting, int bits, std::uint64_t seed)>;

/// Trains every setting at every bit-width for every seed. Seed k drives
/// both model initialization and batch order, shared across settings.
AblationReport run_ablation(const ModelFactory& factory, const Corpus& data,
                            const TrainConfig& base, const std::vector<int>& bits,
                            const std::vector<std::uint64_t>& seeds,
                            const std::function<void(const std::string&)>& progress = {});

}  // namespace dlqat
