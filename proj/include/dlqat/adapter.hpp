#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dlqat/quant.hpp"
#include "dlqat/tensor.hpp"

namespace dlqat {

enum class ClipMode { MinMax, LearnThenFix, Learn };

/// The six magnitude/clipping combinations. S5 is the full method:
/// learned-then-frozen clipping plus a learnable magnitude.
enum class AblationSetting { S1 = 1, S2, S3, S4, S5, S6 };

struct SettingTraits {
  bool magnitude;
  ClipMode clip;
};

SettingTraits traits(AblationSetting setting);
AblationSetting setting_from_index(int index);
int setting_index(AblationSetting setting);
std::string_view clip_mode_label(ClipMode mode);
/// "N/A" or "Learn", as in the magnitude column of the ablation table.
std::string_view magnitude_label(AblationSetting setting);
/// E.g. "s,b then m,A,B".
std::string learnable_label(AblationSetting setting);

enum class Phase { Warmup, Main };
std::string_view phase_label(Phase phase);
/// MinMax settings derive s, b every forward and never run a warm-up.
bool has_warmup(AblationSetting setting);

enum class ParamKind : std::uint8_t { Scale, Offset, Magnitude, LoraA, LoraB };
inline constexpr std::array<ParamKind, 5> kAllParamKinds = {
    ParamKind::Scale, ParamKind::Offset, ParamKind::Magnitude, ParamKind::LoraA, ParamKind::LoraB};
std::string_view param_kind_label(ParamKind kind);

/// Small bitset over ParamKind.
class ParamSet {
 public:
  ParamSet() = default;
  ParamSet(std::initializer_list<ParamKind> kinds) {
    for (auto k : kinds) insert(k);
  }
  void insert(ParamKind k) { bits_ |= bit(k); }
  bool contains(ParamKind k) const { return (bits_ & bit(k)) != 0; }
  bool empty() const { return bits_ == 0; }
  std::vector<ParamKind> kinds() const;
  /// Comma-joined labels in canonical order, e.g. "m,A,B".
  std::string str() const;
  friend bool operator==(const ParamSet&, const ParamSet&) = default;

 private:
  static std::uint8_t bit(ParamKind k) { return static_cast<std::uint8_t>(1u << static_cast<unsigned>(k)); }
  std::uint8_t bits_ = 0;
};

/// Parameters the optimizer may update for `setting` in `phase`. Settings
/// without a warm-up report their main-phase set for both phases.
ParamSet trainable_set(AblationSetting setting, Phase phase);

struct LoraAdapter {
  Tensor a;  // [r x C_in], Gaussian at init
  Tensor b;  // [C_out x r], zeros at init
  double alpha = 2.0;
  std::size_t rank = 0;
};

struct LinearOptions {
  QuantSpec spec = QuantSpec::per_channel(4);
  AblationSetting setting = AblationSetting::S5;
  std::size_t rank = 16;
  double alpha = 2.0;
  /// When false the layer is a plain LoRA linear (no fake quantization).
  bool quantize = true;
};

/// Fake-quantized linear layer: Y = m * Q(W0 + alpha * B * A) . X + bias.
class DLQATLinear {
 public:
  DLQATLinear(Tensor w0, const LinearOptions& options, std::mt19937_64& rng,
              std::optional<Tensor> bias = std::nullopt);

  std::size_t in_features() const { return w0_.cols(); }
  std::size_t out_features() const { return w0_.rows(); }
  const QuantSpec& spec() const { return options_.spec; }
  AblationSetting setting() const { return options_.setting; }
  bool quantized() const { return options_.quantize; }

  /// W0 + alpha * (B . A), recorded on the graph.
  Tensor effective_weight() const;
  /// Weight used by forward in `phase`. In MinMax mode this refreshes the
  /// stored s, b from the current effective weight.
  Tensor quantized_weight(Phase phase);
  /// X: [C_in x T] -> [C_out x T]. Throws GraphError on a phase the setting
  /// cannot run in (warm-up for MinMax; main phase of LearnThenFix before
  /// the freeze; warm-up after it).
  Tensor forward(const Tensor& x, Phase phase);

  Tensor& param(ParamKind kind);
  const Tensor& param(ParamKind kind) const;
  const Tensor& base_weight() const { return w0_; }
  const LoraAdapter& adapter() const { return adapter_; }
  const QuantParams& qparams() const { return qparams_; }
  const std::optional<Tensor>& bias() const { return bias_; }

  /// Marks exactly the kinds in `set` as requiring grad. Derived s, b in
  /// MinMax mode and the absent magnitude of S1-S3 are never marked.
  void set_trainable(const ParamSet& set);
  /// Ends the warm-up of a LearnThenFix layer: s, b become s0, b0.
  void freeze_scale_offset();
  /// Prepares for export: materializes the current s, b (MinMax mode),
  /// rounds s, b, m to binary32 and pins them. Afterwards forward uses the
  /// stored values in every mode, which is what a packed copy reproduces.
  void finalize_for_export();
  bool finalized() const { return finalized_; }

 private:
  void refresh_minmax_params();
  void check_phase(Phase phase) const;

  Tensor w0_;
  LoraAdapter adapter_;
  QuantParams qparams_;
  LinearOptions options_;
  std::optional<Tensor> bias_;
  bool finalized_ = false;
};

}  // namespace dlqat
