#include "dlqat/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dlqat/ops.hpp"
#include "dlqat/quant.hpp"

namespace dlqat {

void TinyLMConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (vocab_size == 0 || vocab_size > 256) fail("vocab_size must be in [1, 256] for byte tokens");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_hidden == 0 || context_length == 0) {
    fail("dimensions must be positive");
  }
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if ((d_model / n_heads) % 2 != 0) fail("head dimension must be even for rotary encoding");
  if (activation_bits && (*activation_bits < 2 || *activation_bits > 8)) {
    fail("activation_bits must be in [2, 8]");
  }
  spec.validate(d_model);
  spec.validate(ffn_hidden);
  if (head_init_gain < 0.0) fail("head_init_gain must be nonnegative");
}

TinyLM::TinyLM(const TinyLMConfig& config) : config_(config) {
  config_.validate();
  phase_ = has_warmup(config_.setting) && config_.quantize ? Phase::Warmup : Phase::Main;
  std::mt19937_64 rng(config_.seed);
  const std::size_t d = config_.d_model, f = config_.ffn_hidden;
  embedding_ = Tensor::randn({config_.vocab_size, d}, 1.0, rng);
  LinearOptions opts;
  opts.spec = config_.spec;
  opts.setting = config_.setting;
  opts.rank = config_.rank;
  opts.alpha = config_.alpha;
  opts.quantize = config_.quantize;
  blocks_.resize(config_.n_layers);
  for (auto& block : blocks_) {
    for (auto kind : kProjectionKinds) {
      std::size_t c_out = d, c_in = d;
      if (kind == "gate" || kind == "up") c_out = f;
      if (kind == "down") c_in = f;
      Tensor w0 = Tensor::randn({c_out, c_in}, 1.0 / std::sqrt(static_cast<double>(c_in)), rng);
      block.proj.emplace(std::string(kind), DLQATLinear(std::move(w0), opts, rng));
    }
  }
  const double head_std = config_.head_init_gain / std::sqrt(static_cast<double>(d));
  head_ = head_std > 0.0 ? Tensor::randn({config_.vocab_size, d}, head_std, rng)
                         : Tensor::zeros({config_.vocab_size, d});
}

Tensor TinyLM::maybe_quantize_activation(const Tensor& x) const {
  if (!config_.quantize || !config_.activation_bits) return x;
  return fake_quantize_activation(x, *config_.activation_bits);
}

Tensor TinyLM::project(std::size_t layer, std::string_view kind, const Tensor& x) {
  const std::string name = "layers." + std::to_string(layer) + "." + std::string(kind);
  Tensor input = maybe_quantize_activation(x);
  if (auto it = overrides_.find(name); it != overrides_.end()) return matmul(it->second, input);
  return blocks_[layer].proj.find(kind)->second.forward(input, phase_);
}

Tensor TinyLM::forward(std::span<const std::int32_t> tokens, std::size_t seq_len) {
  if (seq_len == 0 || tokens.size() % seq_len != 0) {
    throw ShapeError("forward: token count is not a multiple of seq_len");
  }
  const std::size_t heads = config_.n_heads;
  Tensor x = embedding_lookup(embedding_, tokens);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    Tensor h = rmsnorm(x);
    Tensor q = rope(project(l, "q", h), heads, seq_len);
    Tensor k = project(l, "k", h);
    Tensor v = project(l, "v", h);
    k = rope(maybe_quantize_activation(k), heads, seq_len);
    v = maybe_quantize_activation(v);
    Tensor attn = causal_attention(q, k, v, heads, seq_len);
    x = add(x, project(l, "o", attn));

    Tensor h2 = rmsnorm(x);
    Tensor gated = mul(silu(project(l, "gate", h2)), project(l, "up", h2));
    x = add(x, project(l, "down", gated));
  }
  return matmul(head_, rmsnorm(x));
}

Tensor TinyLM::loss(std::span<const std::int32_t> inputs, std::span<const std::int32_t> targets,
                    std::size_t seq_len) {
  return cross_entropy(forward(inputs, seq_len), targets);
}

std::vector<TinyLM::NamedLinear> TinyLM::linears() {
  std::vector<NamedLinear> out;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    for (auto kind : kProjectionKinds) {
      out.push_back({"layers." + std::to_string(l) + "." + std::string(kind),
                     &blocks_[l].proj.find(kind)->second});
    }
  }
  return out;
}

DLQATLinear& TinyLM::linear(const std::string& name) {
  for (auto& nl : linears()) {
    if (nl.name == name) return *nl.layer;
  }
  throw std::out_of_range("no projection named " + name);
}

void TinyLM::set_trainable(const ParamSet& set) {
  for (auto& nl : linears()) nl.layer->set_trainable(set);
}

void TinyLM::freeze_scale_offset() {
  for (auto& nl : linears()) {
    if (traits(nl.layer->setting()).clip == ClipMode::LearnThenFix) nl.layer->freeze_scale_offset();
  }
}

void TinyLM::finalize_for_export() {
  for (auto& nl : linears()) nl.layer->finalize_for_export();
}

void TinyLM::set_weight_override(const std::string& name, Tensor weight) {
  auto& layer = linear(name);
  if (weight.shape() != layer.base_weight().shape()) {
    throw ShapeError("override for " + name + " has shape " + shape_str(weight.shape()));
  }
  overrides_[name] = std::move(weight);
}

Perplexity perplexity(TinyLM& model, std::span<const std::int32_t> eval_ids,
                      std::size_t context_length) {
  if (eval_ids.empty()) throw std::invalid_argument("perplexity: empty evaluation split");
  if (eval_ids.size() <= context_length) {
    throw std::invalid_argument("perplexity: evaluation split must be longer than the context");
  }
  NoGradGuard no_grad;
  const std::size_t windows = (eval_ids.size() - 1) / context_length;
  constexpr std::size_t kWindowsPerPass = 16;
  double total_nll = 0.0;
  std::size_t tokens = 0;
  for (std::size_t w0 = 0; w0 < windows; w0 += kWindowsPerPass) {
    const std::size_t count = std::min(kWindowsPerPass, windows - w0);
    std::vector<std::int32_t> inputs, targets;
    inputs.reserve(count * context_length);
    targets.reserve(count * context_length);
    for (std::size_t w = w0; w < w0 + count; ++w) {
      const std::size_t start = w * context_length;
      inputs.insert(inputs.end(), eval_ids.begin() + start, eval_ids.begin() + start + context_length);
      targets.insert(targets.end(), eval_ids.begin() + start + 1,
                     eval_ids.begin() + start + context_length + 1);
    }
    Tensor l = model.loss(inputs, targets, context_length);
    total_nll += l.item() * static_cast<double>(targets.size());
    tokens += targets.size();
  }
  Perplexity p;
  p.tokens = tokens;
  p.mean_nll = total_nll / static_cast<double>(tokens);
  p.ppl = std::exp(p.mean_nll);
  return p;
}

}  // namespace dlqat
