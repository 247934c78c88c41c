#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dlqat/adapter.hpp"
#include "dlqat/tensor.hpp"

namespace dlqat {

inline constexpr std::array<std::string_view, 7> kProjectionKinds = {"q",    "k",  "v",   "o",
                                                                     "gate", "up", "down"};

/// Byte-level pre-norm transformer: RMSNorm, rotary attention, SiLU-gated
/// feed-forward. Every projection is a DLQATLinear.
struct TinyLMConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t ffn_hidden = 176;
  std::size_t context_length = 64;

  bool quantize = true;
  QuantSpec spec = QuantSpec::per_channel(4);
  /// Activation and K/V fake-quantization bits (W-A-KV runs); unset = off.
  std::optional<int> activation_bits;
  AblationSetting setting = AblationSetting::S5;
  std::size_t rank = 16;
  double alpha = 2.0;

  /// Output head entries ~ N(0, (gain / sqrt(d_model))^2). Zero gives a
  /// uniform predictor.
  double head_init_gain = 2.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Perplexity {
  double mean_nll = 0.0;  // nats per token
  double ppl = 0.0;
  std::size_t tokens = 0;
};

class TinyLM {
 public:
  explicit TinyLM(const TinyLMConfig& config);
  // Parameters are shared handles; a copy would alias them.
  TinyLM(const TinyLM&) = delete;
  TinyLM& operator=(const TinyLM&) = delete;
  TinyLM(TinyLM&&) = default;
  TinyLM& operator=(TinyLM&&) = default;

  const TinyLMConfig& config() const { return config_; }

  Phase phase() const { return phase_; }
  void set_phase(Phase phase) { phase_ = phase; }

  /// tokens: `batch * seq_len` ids, one sequence after another.
  /// Returns logits [vocab x (batch * seq_len)].
  Tensor forward(std::span<const std::int32_t> tokens, std::size_t seq_len);
  Tensor loss(std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
              std::size_t seq_len);

  struct NamedLinear {
    std::string name;
    DLQATLinear* layer;
  };
  /// All projections as "layers.<i>.<kind>", in layer then kind order.
  std::vector<NamedLinear> linears();
  DLQATLinear& linear(const std::string& name);

  const Tensor& embedding() const { return embedding_; }
  const Tensor& head() const { return head_; }
  /// Frozen tensors outside the projections (embedding, output head).
  Tensor& mutable_head() { return head_; }

  void set_trainable(const ParamSet& set);
  void freeze_scale_offset();
  void finalize_for_export();

  /// Replaces the weight a projection multiplies by (e.g. one reconstructed
  /// from a pack file). The projection's own parameters are bypassed.
  void set_weight_override(const std::string& name, Tensor weight);
  void clear_weight_overrides() { overrides_.clear(); }

 private:
  struct Block {
    std::map<std::string, DLQATLinear, std::less<>> proj;
  };

  Tensor project(std::size_t layer, std::string_view kind, const Tensor& x);
  Tensor maybe_quantize_activation(const Tensor& x) const;

  TinyLMConfig config_;
  Phase phase_;
  Tensor embedding_;
  Tensor head_;
  std::vector<Block> blocks_;
  std::map<std::string, Tensor, std::less<>> overrides_;
};

/// exp(mean NLL) over non-overlapping windows of `context_length` inputs
/// (each predicting the following byte). Deterministic; records no graph.
Perplexity perplexity(TinyLM& model, std::span<const std::int32_t> eval_ids,
                      std::size_t context_length);

}  // namespace dlqat
