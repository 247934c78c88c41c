#include "dlqat/adapter.hpp"

#include <cmath>
#include <stdexcept>

#include "dlqat/ops.hpp"

namespace dlqat {

SettingTraits traits(AblationSetting setting) {
  switch (setting) {
    case AblationSetting::S1: return {false, ClipMode::MinMax};
    case AblationSetting::S2: return {false, ClipMode::LearnThenFix};
    case AblationSetting::S3: return {false, ClipMode::Learn};
    case AblationSetting::S4: return {true, ClipMode::MinMax};
    case AblationSetting::S5: return {true, ClipMode::LearnThenFix};
    case AblationSetting::S6: return {true, ClipMode::Learn};
  }
  throw std::invalid_argument("unknown ablation setting");
}

AblationSetting setting_from_index(int index) {
  if (index < 1 || index > 6) {
    throw std::invalid_argument("ablation setting must be 1-6, got " + std::to_string(index));
  }
  return static_cast<AblationSetting>(index);
}

int setting_index(AblationSetting setting) { return static_cast<int>(setting); }

std::string_view clip_mode_label(ClipMode mode) {
  switch (mode) {
    case ClipMode::MinMax: return "MinMax";
    case ClipMode::LearnThenFix: return "Learn then fix";
    case ClipMode::Learn: return "Learn";
  }
  return "?";
}

std::string_view magnitude_label(AblationSetting setting) {
  return traits(setting).magnitude ? "Learn" : "N/A";
}

std::string learnable_label(AblationSetting setting) {
  const auto main = trainable_set(setting, Phase::Main).str();
  if (traits(setting).clip == ClipMode::LearnThenFix) {
    return trainable_set(setting, Phase::Warmup).str() + " then " + main;
  }
  return main;
}

std::string_view phase_label(Phase phase) { return phase == Phase::Warmup ? "warmup" : "main"; }

bool has_warmup(AblationSetting setting) { return traits(setting).clip != ClipMode::MinMax; }

std::string_view param_kind_label(ParamKind kind) {
  switch (kind) {
    case ParamKind::Scale: return "s";
    case ParamKind::Offset: return "b";
    case ParamKind::Magnitude: return "m";
    case ParamKind::LoraA: return "A";
    case ParamKind::LoraB: return "B";
  }
  return "?";
}

std::vector<ParamKind> ParamSet::kinds() const {
  // Canonical order follows the ablation table: m, s, b, A, B.
  std::vector<ParamKind> out;
  for (auto k : {ParamKind::Magnitude, ParamKind::Scale, ParamKind::Offset, ParamKind::LoraA,
                 ParamKind::LoraB}) {
    if (contains(k)) out.push_back(k);
  }
  return out;
}

std::string ParamSet::str() const {
  std::string s;
  for (auto k : kinds()) {
    if (!s.empty()) s += ',';
    s += param_kind_label(k);
  }
  return s;
}

ParamSet trainable_set(AblationSetting setting, Phase phase) {
  const auto t = traits(setting);
  if (phase == Phase::Warmup && t.clip != ClipMode::MinMax) {
    return {ParamKind::Scale, ParamKind::Offset};
  }
  ParamSet set{ParamKind::LoraA, ParamKind::LoraB};
  if (t.magnitude) set.insert(ParamKind::Magnitude);
  if (t.clip == ClipMode::Learn) {
    set.insert(ParamKind::Scale);
    set.insert(ParamKind::Offset);
  }
  return set;
}

DLQATLinear::DLQATLinear(Tensor w0, const LinearOptions& options, std::mt19937_64& rng,
                         std::optional<Tensor> bias)
    : w0_(std::move(w0)), options_(options), bias_(std::move(bias)) {
  const std::size_t c_out = w0_.rows(), c_in = w0_.cols();
  options_.spec.validate(c_in);
  if (options_.rank == 0 || 2 * options_.rank > std::min(c_in, c_out)) {
    throw std::invalid_argument("LoRA rank " + std::to_string(options_.rank) +
                                " must be in [1, min(C_in, C_out)/2] for a " +
                                shape_str(w0_.shape()) + " weight");
  }
  if (bias_ && bias_->shape() != Shape{c_out, 1}) {
    throw ShapeError("bias must be shaped [C_out x 1]");
  }
  w0_.set_requires_grad(false);
  adapter_.rank = options_.rank;
  adapter_.alpha = options_.alpha;
  adapter_.a = Tensor::randn({options_.rank, c_in}, 1.0 / std::sqrt(static_cast<double>(options_.rank)), rng);
  adapter_.b = Tensor::zeros({c_out, options_.rank});
  qparams_ = init_quant_params(w0_, options_.spec);
}

Tensor DLQATLinear::effective_weight() const {
  return add(w0_, mul_scalar(matmul(adapter_.b, adapter_.a), adapter_.alpha));
}

void DLQATLinear::refresh_minmax_params() {
  // Derived from the current effective weight; constants on the graph.
  Tensor w = effective_weight().detach();
  auto fresh = init_quant_params(w, options_.spec);
  std::copy(fresh.scale.data().begin(), fresh.scale.data().end(), qparams_.scale.mutable_data().begin());
  std::copy(fresh.offset.data().begin(), fresh.offset.data().end(), qparams_.offset.mutable_data().begin());
}

void DLQATLinear::check_phase(Phase phase) const {
  if (finalized_ || !options_.quantize) return;
  const auto clip = traits(options_.setting).clip;
  if (clip == ClipMode::MinMax && phase == Phase::Warmup) {
    throw GraphError("MinMax clipping has no warm-up phase");
  }
  if (clip == ClipMode::LearnThenFix) {
    if (phase == Phase::Main && !qparams_.frozen_sb) {
      throw GraphError("main phase requires frozen s, b for learn-then-fix clipping");
    }
    if (phase == Phase::Warmup && qparams_.frozen_sb) {
      throw GraphError("warm-up phase after s, b were frozen");
    }
  }
}

Tensor DLQATLinear::quantized_weight(Phase phase) {
  check_phase(phase);
  Tensor w = effective_weight();
  if (!options_.quantize) return w;
  if (!finalized_ && traits(options_.setting).clip == ClipMode::MinMax) refresh_minmax_params();
  const Tensor none;
  const Tensor& m = traits(options_.setting).magnitude ? qparams_.magnitude : none;
  return fake_quantize(w, qparams_.scale, qparams_.offset, m, options_.spec);
}

Tensor DLQATLinear::forward(const Tensor& x, Phase phase) {
  if (x.rows() != in_features()) {
    throw ShapeError("linear forward: input " + shape_str(x.shape()) + " for weight " +
                     shape_str(w0_.shape()));
  }
  Tensor y = matmul(quantized_weight(phase), x);
  if (bias_) {
    Tensor ones = Tensor::ones({1, x.cols()});
    y = add(y, matmul(*bias_, ones));
  }
  return y;
}

Tensor& DLQATLinear::param(ParamKind kind) {
  return const_cast<Tensor&>(std::as_const(*this).param(kind));
}

const Tensor& DLQATLinear::param(ParamKind kind) const {
  switch (kind) {
    case ParamKind::Scale: return qparams_.scale;
    case ParamKind::Offset: return qparams_.offset;
    case ParamKind::Magnitude: return qparams_.magnitude;
    case ParamKind::LoraA: return adapter_.a;
    case ParamKind::LoraB: return adapter_.b;
  }
  throw std::invalid_argument("unknown parameter kind");
}

void DLQATLinear::set_trainable(const ParamSet& set) {
  const auto t = traits(options_.setting);
  for (auto kind : kAllParamKinds) {
    bool flag = set.contains(kind) && !finalized_;
    if ((kind == ParamKind::Scale || kind == ParamKind::Offset) &&
        (t.clip == ClipMode::MinMax || qparams_.frozen_sb || !options_.quantize)) {
      flag = false;
    }
    if (kind == ParamKind::Magnitude && (!t.magnitude || !options_.quantize)) flag = false;
    param(kind).set_requires_grad(flag);
  }
}

void DLQATLinear::freeze_scale_offset() {
  qparams_.frozen_sb = true;
  qparams_.scale.set_requires_grad(false);
  qparams_.offset.set_requires_grad(false);
}

void DLQATLinear::finalize_for_export() {
  if (options_.quantize && traits(options_.setting).clip == ClipMode::MinMax) {
    refresh_minmax_params();
  }
  for (auto kind : {ParamKind::Scale, ParamKind::Offset, ParamKind::Magnitude}) {
    for (double& v : param(kind).mutable_data()) v = static_cast<double>(static_cast<float>(v));
  }
  for (double& v : qparams_.scale.mutable_data()) v = std::max(v, static_cast<double>(static_cast<float>(kScaleFloor)));
  qparams_.frozen_sb = true;
  finalized_ = true;
  set_trainable({});
}

}  // namespace dlqat
