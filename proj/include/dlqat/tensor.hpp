#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dlqat {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward result contains NaN/Inf, or on division by zero.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;
struct TensorImpl;

/// One recorded operation. `backward` reads the output gradient and
/// accumulates into the gradients of `inputs`.
struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  std::function<void(std::span<const double> grad_out)> backward;
  bool consumed = false;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;
  std::shared_ptr<Node> grad_fn;
};

/// Dense row-major array of doubles with reverse-mode gradient tracking.
///
/// A Tensor is a handle: copies share storage, so a parameter held by a layer
/// and the same parameter seen by the graph are one object. Use clone() for
/// an independent copy.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return full({1}, value, requires_grad);
  }
  static Tensor randn(Shape shape, double stddev, std::mt19937_64& rng,
                      bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t ndim() const { return shape().size(); }
  std::size_t numel() const { return impl().data.size(); }
  std::size_t dim(std::size_t i) const;
  /// 2-D accessors; throw ShapeError if the tensor is not a matrix.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return impl().data; }
  /// Direct write access. Only valid on leaves; graph outputs are immutable.
  std::span<double> mutable_data();
  double at(std::size_t i) const { return impl().data.at(i); }
  double at(std::size_t r, std::size_t c) const;
  double item() const;

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return impl().grad_fn == nullptr; }

  bool has_grad() const { return impl().grad.has_value(); }
  std::span<const double> grad() const;
  /// Gradient buffer, allocated as zeros on first use.
  std::vector<double>& grad_buffer();
  void clear_grad() { impl().grad.reset(); }

  /// Same values, no graph history, no gradient.
  Tensor detach() const;
  /// Independent deep copy of values (no graph, keeps requires_grad flag).
  Tensor clone() const;

  const std::shared_ptr<Node>& grad_fn() const { return impl().grad_fn; }
  const TensorImpl* id() const { return impl_.get(); }

  static Tensor from_op(Shape shape, std::vector<double> data, std::string op,
                        std::vector<Tensor> inputs,
                        std::function<void(std::span<const double>)> backward);

 private:
  TensorImpl& impl();
  const TensorImpl& impl() const;

  std::shared_ptr<TensorImpl> impl_;
};

/// While alive, operations record no graph (evaluation-only forwards).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Reverse-mode sweep from a scalar loss. Each node runs exactly once in
/// reverse topological order; gradients of shared inputs are summed.
/// Leaf gradients persist; intermediate gradients are released. The graph
/// is consumed, so a second call on the same loss throws GraphError.
void backward(const Tensor& loss);

/// Throws NumericError naming `op` if any value is NaN or infinite.
void check_finite(std::span<const double> values, const std::string& op);

}  // namespace dlqat
