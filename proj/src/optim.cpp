#include "dlqat/optim.hpp"

#include <cmath>

namespace dlqat {

AdamW::AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWOptions options)
    : options_(options) {
  slots_.reserve(params.size());
  for (auto& [name, t] : params) {
    const auto n = t.numel();
    slots_.push_back({std::move(name), t, std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
  }
}

void AdamW::zero_grad() {
  for (auto& s : slots_) s.param.clear_grad();
}

void AdamW::step(double lr) {
  for (const auto& s : slots_) {
    if (!s.param.has_grad()) throw GraphError("AdamW: missing gradient for " + s.name);
  }
  ++steps_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (auto& s : slots_) {
    auto p = s.param.mutable_data();
    auto g = s.param.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      s.m[i] = options_.beta1 * s.m[i] + (1.0 - options_.beta1) * g[i];
      s.v[i] = options_.beta2 * s.v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      if (options_.weight_decay != 0.0) p[i] -= lr * options_.weight_decay * p[i];
      const double m_hat = s.m[i] / bc1;
      const double v_hat = s.v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.eps);
    }
  }
}

}  // namespace dlqat
