#include "dlqat/quant.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "dlqat/ops.hpp"

namespace dlqat {

QuantSpec QuantSpec::per_channel(int bits) {
  QuantSpec s{bits, std::nullopt};
  s.validate();
  return s;
}

QuantSpec QuantSpec::grouped(int bits, std::size_t group_size) {
  QuantSpec s{bits, group_size};
  s.validate();
  return s;
}

std::size_t QuantSpec::group_width(std::size_t c_in) const {
  return group_size ? *group_size : c_in;
}

std::size_t QuantSpec::groups_per_row(std::size_t c_in) const {
  const auto w = group_width(c_in);
  return (c_in + w - 1) / w;
}

void QuantSpec::validate(std::optional<std::size_t> c_in) const {
  if (bits < 2 || bits > 8) {
    throw std::invalid_argument("quantizer bits must be in [2, 8], got " + std::to_string(bits));
  }
  if (group_size && *group_size == 0) throw std::invalid_argument("group size must be positive");
  if (group_size && c_in && *c_in % *group_size != 0) {
    throw std::invalid_argument("group size " + std::to_string(*group_size) +
                                " does not divide input channels " + std::to_string(*c_in));
  }
}

std::string QuantSpec::describe() const {
  std::ostringstream os;
  os << bits << "-bit ";
  if (group_size) {
    os << "g" << *group_size;
  } else {
    os << "per-channel";
  }
  return os.str();
}

GroupView GroupView::of(std::size_t rows, std::size_t cols, const QuantSpec& spec) {
  spec.validate(cols);
  GroupView v;
  v.rows = rows;
  v.cols = cols;
  v.width = spec.group_width(cols);
  v.per_row = spec.groups_per_row(cols);
  return v;
}

namespace {

void require_param_shape(const Tensor& p, const GroupView& view, const char* what) {
  if (p.shape() != view.param_shape()) {
    throw ShapeError(std::string(what) + " has shape " + shape_str(p.shape()) + ", expected " +
                     shape_str(view.param_shape()));
  }
}

void require_positive(const Tensor& scale) {
  for (double s : scale.data()) {
    if (!(s > 0.0)) throw std::invalid_argument("quantizer scale must be positive");
  }
}

}  // namespace

GroupRange minmax_per_group(const Tensor& w, const QuantSpec& spec) {
  const auto view = GroupView::of(w.rows(), w.cols(), spec);
  GroupRange range;
  range.min.assign(view.group_count(), std::numeric_limits<double>::infinity());
  range.max.assign(view.group_count(), -std::numeric_limits<double>::infinity());
  auto x = w.data();
  for (std::size_t r = 0; r < view.rows; ++r) {
    for (std::size_t c = 0; c < view.cols; ++c) {
      const auto g = view.group_of(r, c);
      range.min[g] = std::min(range.min[g], x[r * view.cols + c]);
      range.max[g] = std::max(range.max[g], x[r * view.cols + c]);
    }
  }
  return range;
}

ScaleOffset init_scale_bias(double min, double max, int bits) {
  if (max < min) throw std::invalid_argument("init_scale_bias: max < min");
  if (max == min) return {kScaleFloor, min};
  const double levels = std::ldexp(1.0, bits) - 1.0;
  const double half = std::ldexp(1.0, bits - 1);
  const double scale = (max - min) / levels;
  const double offset = (half * max + (half - 1.0) * min) / levels;
  return {std::max(scale, kScaleFloor), offset};
}

QuantParams init_quant_params(const Tensor& w, const QuantSpec& spec) {
  const auto view = GroupView::of(w.rows(), w.cols(), spec);
  const auto range = minmax_per_group(w, spec);
  std::vector<double> s(view.group_count()), b(view.group_count());
  for (std::size_t g = 0; g < view.group_count(); ++g) {
    const auto so = init_scale_bias(range.min[g], range.max[g], spec.bits);
    s[g] = so.scale;
    b[g] = so.offset;
  }
  QuantParams p;
  p.scale = Tensor(view.param_shape(), std::move(s));
  p.offset = Tensor(view.param_shape(), std::move(b));
  p.magnitude = Tensor::ones(view.param_shape());
  return p;
}

int quantize_value(double w, double scale, double offset, int qmin, int qmax) {
  const double q = round_half_even((w - offset) / scale);
  return static_cast<int>(std::clamp(q, static_cast<double>(qmin), static_cast<double>(qmax)));
}

std::vector<std::int32_t> quantize_ints(const Tensor& w, const Tensor& scale,
                                        const Tensor& offset, const QuantSpec& spec) {
  const auto view = GroupView::of(w.rows(), w.cols(), spec);
  require_param_shape(scale, view, "scale");
  require_param_shape(offset, view, "offset");
  require_positive(scale);
  auto x = w.data();
  auto s = scale.data(), b = offset.data();
  std::vector<std::int32_t> grid(x.size());
  const int lo = spec.qmin(), hi = spec.qmax();
  for (std::size_t r = 0; r < view.rows; ++r) {
    for (std::size_t c = 0; c < view.cols; ++c) {
      const auto g = view.group_of(r, c);
      grid[r * view.cols + c] = quantize_value(x[r * view.cols + c], s[g], b[g], lo, hi);
    }
  }
  return grid;
}

Tensor dequantize(std::span<const std::int32_t> grid, const Shape& shape, const Tensor& scale,
                  const Tensor& offset, const Tensor& magnitude, const QuantSpec& spec) {
  if (shape.size() != 2 || numel_of(shape) != grid.size()) {
    throw ShapeError("dequantize: grid of " + std::to_string(grid.size()) +
                     " values does not fit " + shape_str(shape));
  }
  const auto view = GroupView::of(shape[0], shape[1], spec);
  require_param_shape(scale, view, "scale");
  require_param_shape(offset, view, "offset");
  if (magnitude.defined()) require_param_shape(magnitude, view, "magnitude");
  auto s = scale.data(), b = offset.data();
  std::vector<double> out(grid.size());
  for (std::size_t r = 0; r < view.rows; ++r) {
    for (std::size_t c = 0; c < view.cols; ++c) {
      const auto g = view.group_of(r, c);
      const auto i = r * view.cols + c;
      if (grid[i] < spec.qmin() || grid[i] > spec.qmax()) {
        throw std::invalid_argument("dequantize: grid value outside the " +
                                    std::to_string(spec.bits) + "-bit range");
      }
      const double inner = s[g] * static_cast<double>(grid[i]) + b[g];
      out[i] = magnitude.defined() ? magnitude.data()[g] * inner : inner;
    }
  }
  return Tensor(shape, std::move(out));
}

SteGradients ste_gradients(const Tensor& w, const Tensor& scale, const Tensor& offset,
                           const Tensor& magnitude, const QuantSpec& spec,
                           std::span<const double> upstream) {
  const auto view = GroupView::of(w.rows(), w.cols(), spec);
  if (upstream.size() != w.numel()) throw ShapeError("ste_gradients: upstream size mismatch");
  auto x = w.data();
  auto s = scale.data(), b = offset.data();
  const double lo = spec.qmin(), hi = spec.qmax();
  SteGradients out;
  out.weight.assign(x.size(), 0.0);
  out.scale.assign(view.group_count(), 0.0);
  out.offset.assign(view.group_count(), 0.0);
  out.magnitude.assign(view.group_count(), 0.0);
  for (std::size_t r = 0; r < view.rows; ++r) {
    for (std::size_t c = 0; c < view.cols; ++c) {
      const auto g = view.group_of(r, c);
      const auto i = r * view.cols + c;
      const double m = magnitude.defined() ? magnitude.data()[g] : 1.0;
      const double u = (x[i] - b[g]) / s[g];
      const double q = std::clamp(round_half_even(u), lo, hi);
      const double mg = m * upstream[i];
      if (u >= lo && u <= hi) {
        out.weight[i] = mg;
        out.scale[g] += mg * (q - u);
      } else {
        out.scale[g] += mg * q;
        out.offset[g] += mg;
      }
      out.magnitude[g] += upstream[i] * (s[g] * q + b[g]);
    }
  }
  return out;
}

Tensor fake_quantize(const Tensor& w, const Tensor& scale, const Tensor& offset,
                     const Tensor& magnitude, const QuantSpec& spec) {
  const auto grid = quantize_ints(w, scale, offset, spec);
  Tensor out = dequantize(grid, w.shape(), scale, offset, magnitude, spec);
  std::vector<Tensor> inputs{w, scale, offset};
  if (magnitude.defined()) inputs.push_back(magnitude);
  return Tensor::from_op(
      w.shape(), std::vector<double>(out.data().begin(), out.data().end()), "fake_quantize",
      std::move(inputs),
      [w, scale, offset, magnitude, spec](std::span<const double> g) mutable {
        auto grads = ste_gradients(w, scale, offset, magnitude, spec, g);
        auto add_into = [](Tensor t, const std::vector<double>& v) {
          if (!t.defined() || !t.requires_grad()) return;
          auto& buf = t.grad_buffer();
          for (std::size_t i = 0; i < v.size(); ++i) buf[i] += v[i];
        };
        add_into(w, grads.weight);
        add_into(scale, grads.scale);
        add_into(offset, grads.offset);
        add_into(magnitude, grads.magnitude);
      });
}

Tensor fake_quantize_activation(const Tensor& x, int bits) {
  QuantSpec{bits, std::nullopt}.validate();
  auto xv = x.data();
  const auto [lo_it, hi_it] = std::minmax_element(xv.begin(), xv.end());
  const auto so = init_scale_bias(*lo_it, *hi_it, bits);
  const int qmin = -(1 << (bits - 1)), qmax = (1 << (bits - 1)) - 1;
  std::vector<double> out(xv.size());
  std::vector<bool> inside(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double u = (xv[i] - so.offset) / so.scale;
    inside[i] = u >= qmin && u <= qmax;
    out[i] = so.scale * quantize_value(xv[i], so.scale, so.offset, qmin, qmax) + so.offset;
  }
  return Tensor::from_op(x.shape(), std::move(out), "fake_quantize_activation", {x},
                         [x = Tensor(x), inside = std::move(inside)](std::span<const double> g) mutable {
                           auto& buf = x.grad_buffer();
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (inside[i]) buf[i] += g[i];
                         });
}

}  // namespace dlqat
