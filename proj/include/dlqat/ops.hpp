#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dlqat/tensor.hpp"

namespace dlqat {

// Dense arithmetic. Binary elementwise ops require identical shapes; the
// broadcast forms are spelled out explicitly.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws NumericError if any divisor element is zero.
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);

/// Multiplies a matrix by a column vector [R x 1] (scales each row) or a row
/// vector [1 x C] (scales each column).
Tensor broadcast_mul(const Tensor& a, const Tensor& v);

/// min(max(x, lo), hi). Gradient passes where lo <= x <= hi.
Tensor clip(const Tensor& a, double lo, double hi);
/// Round half to even. Piecewise constant, so its gradient is zero.
Tensor round_half_even(const Tensor& a);
double round_half_even(double x);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// Neural-network primitives. Activations are laid out features x tokens
// (one column per token), matching Y = W . X.

/// Normalizes each column by its root mean square.
Tensor rmsnorm(const Tensor& x, double eps = 1e-6);
/// Softmax along `axis` (0: down each column, 1: along each row).
Tensor softmax(const Tensor& x, int axis);
Tensor silu(const Tensor& x);
/// Gathers rows of `table` [V x d] into columns: output [d x ids.size()].
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);
/// Mean negative log-likelihood (nats) of `targets` under logits [V x N].
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

/// Rotary position encoding on x [d x (batch * seq_len)]; column j has
/// position j % seq_len. Each head rotates consecutive feature pairs.
Tensor rope(const Tensor& x, std::size_t n_heads, std::size_t seq_len, double base = 10000.0);

/// Causal multi-head softmax attention. q, k, v: [d x (batch * seq_len)].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len);

}  // namespace dlqat
