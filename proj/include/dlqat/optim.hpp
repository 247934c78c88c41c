#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dlqat/tensor.hpp"

namespace dlqat {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with bias correction and decoupled weight decay:
///   p -= lr * wd * p
///   p -= lr * m_hat / (sqrt(v_hat) + eps)
/// State exists only for the tensors it was constructed with.
class AdamW {
 public:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWOptions options = {});

  /// Throws GraphError if a tracked parameter has no gradient.
  void step(double lr);
  void zero_grad();

  std::uint64_t step_count() const { return steps_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const AdamWOptions& options() const { return options_; }

 private:
  std::vector<Slot> slots_;
  AdamWOptions options_;
  std::uint64_t steps_ = 0;
};

}  // namespace dlqat
