#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "dlqat/tensor.hpp"

namespace dlqat {

inline constexpr double kFdStep = 1e-3;
inline constexpr double kSmoothTolerance = 1e-4;
inline constexpr double kMagnitudeTolerance = 1e-5;

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Central finite differences (step h) against autodiff for every input
/// that requires grad. Error per input is the norm-wise relative error
/// ||g_ad - g_fd|| / max(||g_ad||, ||g_fd||); the maximum over inputs is
/// returned. Inputs are perturbed in place and restored.
double fd_relative_error(const LossFn& loss, std::vector<Tensor>& inputs, double h = kFdStep);

struct GradcheckEntry {
  std::string name;
  std::string method;  // "finite-difference" or "closed-form"
  std::size_t points = 0;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  bool passed() const;
};

/// Smooth primitives against finite differences, the magnitude gradient of
/// the quantizer against finite differences, and the W/s/b straight-through
/// gradients against an element-by-element closed-form evaluation.
GradcheckReport run_gradcheck(std::uint64_t seed = 0, std::size_t points = 100);

}  // namespace dlqat
