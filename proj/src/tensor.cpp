#include "dlqat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace dlqat {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void check_finite(std::span<const double> values, const std::string& op) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(op + ": non-finite value at index " + std::to_string(i));
    }
  }
}

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (numel_of(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
  check_finite(data, "Tensor");
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(numel_of(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(numel_of(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

TensorImpl& Tensor::impl() {
  if (!impl_) throw GraphError("use of undefined tensor");
  return *impl_;
}

const TensorImpl& Tensor::impl() const {
  if (!impl_) throw GraphError("use of undefined tensor");
  return *impl_;
}

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= ndim()) throw ShapeError("dimension index out of range for " + shape_str(shape()));
  return shape()[i];
}

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ShapeError("expected a matrix, got " + shape_str(shape()));
  return shape()[1];
}

std::span<double> Tensor::mutable_data() {
  if (!is_leaf()) throw GraphError("cannot mutate the output of a recorded operation");
  return impl().data;
}

double Tensor::at(std::size_t r, std::size_t c) const { return impl().data.at(r * cols() + c); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl().data[0];
}

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw GraphError("requires_grad can only be set on leaves");
  impl().requires_grad = flag;
}

std::span<const double> Tensor::grad() const {
  if (!impl().grad) throw GraphError("tensor has no gradient");
  return *impl().grad;
}

std::vector<double>& Tensor::grad_buffer() {
  auto& i = impl();
  if (!i.grad) i.grad.emplace(i.data.size(), 0.0);
  return *i.grad;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl().data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), impl().data, requires_grad()); }

Tensor Tensor::from_op(Shape shape, std::vector<double> data, std::string op,
                       std::vector<Tensor> inputs,
                       std::function<void(std::span<const double>)> backward_fn) {
  check_finite(data, op);
  Tensor out(std::move(shape), std::move(data), false);
  bool tracked = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                             [](const Tensor& t) { return t.requires_grad(); });
  if (tracked) {
    auto node = std::make_shared<Node>();
    node->op = std::move(op);
    node->inputs = std::move(inputs);
    node->backward = std::move(backward_fn);
    out.impl_->requires_grad = true;
    out.impl_->grad_fn = std::move(node);
  }
  return out;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw GraphError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) throw GraphError("backward() on a tensor that does not require grad");
  if (loss.grad_fn() && loss.grad_fn()->consumed) {
    throw GraphError("backward() called twice on the same graph");
  }

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Tensor> order;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(loss, 0);
  visited.insert(loss.id());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto& fn = t.grad_fn();
    if (fn && next < fn->inputs.size()) {
      const Tensor& in = fn->inputs[next++];
      if (in.requires_grad() && visited.insert(in.id()).second) {
        if (in.grad_fn() && in.grad_fn()->consumed) {
          throw GraphError("backward() reached a graph that was already consumed");
        }
        stack.emplace_back(in, 0);
      }
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  Tensor root = loss;
  root.grad_buffer().assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor t = *it;
    const auto& fn = t.grad_fn();
    if (!fn) continue;
    if (t.has_grad()) {
      const std::vector<double> g(t.grad().begin(), t.grad().end());
      t.clear_grad();
      fn->backward(g);
    }
    fn->consumed = true;
    fn->backward = nullptr;
    fn->inputs.clear();
  }
}

}  // namespace dlqat
