#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlqat/tensor.hpp"

namespace dlqat {

/// Scale floor used for a degenerate (constant) group and as the lower
/// bound that keeps learned scales positive.
inline constexpr double kScaleFloor = 1e-8;

/// Bit-width plus granularity of one weight quantizer. A missing group size
/// means per-channel: one group spanning each output row.
struct QuantSpec {
  int bits = 4;
  std::optional<std::size_t> group_size;

  static QuantSpec per_channel(int bits);
  static QuantSpec grouped(int bits, std::size_t group_size);

  bool is_per_channel() const { return !group_size.has_value(); }
  /// Lowest grid integer, -2^(n-1).
  int qmin() const { return -(1 << (bits - 1)); }
  /// Highest grid integer, 2^(n-1) - 1.
  int qmax() const { return (1 << (bits - 1)) - 1; }
  /// Effective group width for a weight with `c_in` input channels.
  std::size_t group_width(std::size_t c_in) const;
  std::size_t groups_per_row(std::size_t c_in) const;
  /// Throws std::invalid_argument for bits outside [2, 8], a zero group
  /// size, or (when c_in is given) a group size that does not divide it.
  void validate(std::optional<std::size_t> c_in = std::nullopt) const;
  std::string describe() const;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// Layout of groups over a C_out x C_in weight: each group is a run of
/// `width` consecutive input-channel columns within one output row.
struct GroupView {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t width = 0;
  std::size_t per_row = 0;

  static GroupView of(std::size_t rows, std::size_t cols, const QuantSpec& spec);
  std::size_t group_count() const { return rows * per_row; }
  /// Flat index (row-major over rows x per_row) of the group holding (r, c).
  std::size_t group_of(std::size_t r, std::size_t c) const { return r * per_row + c / width; }
  Shape param_shape() const { return {rows, per_row}; }
};

struct GroupRange {
  std::vector<double> min;
  std::vector<double> max;
};

/// Per-group scale, offset and magnitude, all shaped (C_out, groups per row).
struct QuantParams {
  Tensor scale;
  Tensor offset;
  Tensor magnitude;
  bool frozen_sb = false;
};

struct ScaleOffset {
  double scale;
  double offset;
};

GroupRange minmax_per_group(const Tensor& w, const QuantSpec& spec);

/// Maps [min, max] onto the grid endpoints: scale * qmin + offset = min and
/// scale * qmax + offset = max. A constant group (min == max) gets the
/// floor scale and offset = min.
ScaleOffset init_scale_bias(double min, double max, int bits);

/// Scale and offset tensors for every group of `w`, plus magnitude = 1.
QuantParams init_quant_params(const Tensor& w, const QuantSpec& spec);

/// clip(round_half_even((w - offset) / scale), qmin, qmax) for one value.
int quantize_value(double w, double scale, double offset, int qmin, int qmax);

/// Integer grid for `w` under per-group scale/offset. Throws
/// std::invalid_argument on a nonpositive scale.
std::vector<std::int32_t> quantize_ints(const Tensor& w, const Tensor& scale,
                                        const Tensor& offset, const QuantSpec& spec);

/// magnitude * (scale * grid + offset), broadcast per group. Pass an
/// undefined magnitude to mean m = 1.
Tensor dequantize(std::span<const std::int32_t> grid, const Shape& shape, const Tensor& scale,
                  const Tensor& offset, const Tensor& magnitude, const QuantSpec& spec);

/// Per-element and per-group gradients of the straight-through quantizer.
struct SteGradients {
  std::vector<double> weight;
  std::vector<double> scale;
  std::vector<double> offset;
  std::vector<double> magnitude;
};

/// Closed-form STE backward. With u = (w - offset) / scale, q = grid value,
/// inside <=> qmin <= u <= qmax:
///   dW = m * g (inside) | 0 (outside)
///   ds = m * g * (q - u) (inside) | m * g * q (outside)
///   db = 0 (inside) | m * g (outside)
///   dm = g * (scale * q + offset)
/// Group parameters sum over their elements in row-major order.
SteGradients ste_gradients(const Tensor& w, const Tensor& scale, const Tensor& offset,
                           const Tensor& magnitude, const QuantSpec& spec,
                           std::span<const double> upstream);

/// Differentiable fake quantization: forward is dequantize(quantize_ints(w)),
/// backward follows ste_gradients. `magnitude` may be undefined (m = 1).
Tensor fake_quantize(const Tensor& w, const Tensor& scale, const Tensor& offset,
                     const Tensor& magnitude, const QuantSpec& spec);

/// Dynamic per-tensor asymmetric min-max fake quantization for activations
/// and K/V tensors. Gradient passes straight through inside the clip range.
Tensor fake_quantize_activation(const Tensor& x, int bits = 8);

}  // namespace dlqat
