#include "dlqat/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace dlqat {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Tensor is a shared handle, so a copy reaches the same gradient buffer.
void accumulate(Tensor t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto& buf = t.grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

// C[M x N] += A[M x K] * B[K x N]. Rows of C are updated four at a time so
// each row of B is loaded once per block; every C entry still accumulates
// over p in increasing order.
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    for (std::size_t p = 0; p < k; ++p) {
      const double a0 = a[i * k + p], a1 = a[(i + 1) * k + p];
      const double a2 = a[(i + 2) * k + p], a3 = a[(i + 3) * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M x K] += G[M x N] * B[K x N]^T, via an explicit transpose of B so the
// inner loop runs over contiguous memory.
void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n,
             std::size_t k) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  gemm_nn(g, bt.data(), c, m, n, k);
}

// C[K x N] += A[M x K]^T * G[M x N]
void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k,
             std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor unary(const Tensor& a, const char* op, Fwd fwd, Bwd dfdx) {
  std::vector<double> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return Tensor::from_op(a.shape(), std::move(out), op, {a},
                         [a, dfdx](std::span<const double> g) mutable {
                           auto xv = a.data();
                           std::vector<double> ga(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * dfdx(xv[i]);
                           accumulate(a, ga);
                         });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  return Tensor::from_op({m, n}, std::move(out), "matmul", {a, b},
                         [a, b, m, k, n](std::span<const double> g) mutable {
                           if (a.requires_grad()) {
                             std::vector<double> ga(m * k, 0.0);
                             gemm_nt(g.data(), b.data().data(), ga.data(), m, n, k);
                             accumulate(a, ga);
                           }
                           if (b.requires_grad()) {
                             std::vector<double> gb(k * n, 0.0);
                             gemm_tn(a.data().data(), g.data(), gb.data(), m, k, n);
                             accumulate(b, gb);
                           }
                         });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<double> out(r * c);
  auto x = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor::from_op({c, r}, std::move(out), "transpose", {a},
                         [a, r, c](std::span<const double> g) mutable {
                           std::vector<double> ga(r * c);
                           for (std::size_t i = 0; i < r; ++i)
                             for (std::size_t j = 0; j < c; ++j) ga[i * c + j] = g[j * r + i];
                           accumulate(a, ga);
                         });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::from_op(a.shape(), std::move(out), "add", {a, b},
                         [a, b](std::span<const double> g) mutable {
                           accumulate(a, g);
                           accumulate(b, g);
                         });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::from_op(a.shape(), std::move(out), "sub", {a, b},
                         [a, b](std::span<const double> g) mutable {
                           accumulate(a, g);
                           std::vector<double> gb(g.begin(), g.end());
                           for (auto& v : gb) v = -v;
                           accumulate(b, gb);
                         });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::from_op(a.shape(), std::move(out), "mul", {a, b},
                         [a, b](std::span<const double> g) mutable {
                           auto x = a.data(), y = b.data();
                           std::vector<double> ga(g.size()), gb(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ga[i] = g[i] * y[i];
                             gb[i] = g[i] * x[i];
                           }
                           accumulate(a, ga);
                           accumulate(b, gb);
                         });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  auto x = a.data(), y = b.data();
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (y[i] == 0.0) throw NumericError("div: division by zero at index " + std::to_string(i));
    out[i] = x[i] / y[i];
  }
  return Tensor::from_op(a.shape(), std::move(out), "div", {a, b},
                         [a, b](std::span<const double> g) mutable {
                           auto x = a.data(), y = b.data();
                           std::vector<double> ga(g.size()), gb(g.size());
                           for (std::size_t i = 0; i < g.size(); ++i) {
                             ga[i] = g[i] / y[i];
                             gb[i] = -g[i] * x[i] / (y[i] * y[i]);
                           }
                           accumulate(a, ga);
                           accumulate(b, gb);
                         });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary(a, "mul_scalar", [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor broadcast_mul(const Tensor& a, const Tensor& v) {
  const std::size_t r = a.rows(), c = a.cols();
  const bool per_row = v.rows() == r && v.cols() == 1;
  const bool per_col = v.rows() == 1 && v.cols() == c;
  if (!per_row && !per_col) {
    throw ShapeError("broadcast_mul: cannot broadcast " + shape_str(v.shape()) + " over " +
                     shape_str(a.shape()));
  }
  auto x = a.data(), s = v.data();
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = x[i * c + j] * s[per_row ? i : j];
  return Tensor::from_op(a.shape(), std::move(out), "broadcast_mul", {a, v},
                         [a, v, r, c, per_row](std::span<const double> g) mutable {
                           auto x = a.data(), s = v.data();
                           std::vector<double> ga(r * c), gv(v.numel(), 0.0);
                           for (std::size_t i = 0; i < r; ++i) {
                             for (std::size_t j = 0; j < c; ++j) {
                               const std::size_t k = per_row ? i : j;
                               ga[i * c + j] = g[i * c + j] * s[k];
                               gv[k] += g[i * c + j] * x[i * c + j];
                             }
                           }
                           accumulate(a, ga);
                           accumulate(v, gv);
                         });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return unary(
      a, "clip", [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

double round_half_even(double x) {
  // nearbyint honours the current rounding mode, which defaults to
  // round-to-nearest-even.
  return std::nearbyint(x);
}

Tensor round_half_even(const Tensor& a) {
  return unary(
      a, "round_half_even", [](double x) { return round_half_even(x); },
      [](double) { return 0.0; });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  return Tensor::from_op({1}, {acc}, "sum", {a}, [a](std::span<const double> g) mutable {
    std::vector<double> ga(a.numel(), g[0]);
    accumulate(a, ga);
  });
}

Tensor mean(const Tensor& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor rmsnorm(const Tensor& x, double eps) {
  const std::size_t d = x.rows(), n = x.cols();
  auto xv = x.data();
  std::vector<double> inv(n), out(d * n);
  for (std::size_t j = 0; j < n; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += xv[i * n + j] * xv[i * n + j];
    inv[j] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
    for (std::size_t i = 0; i < d; ++i) out[i * n + j] = xv[i * n + j] * inv[j];
  }
  return Tensor::from_op(x.shape(), std::move(out), "rmsnorm", {x},
                         [x, inv, d, n](std::span<const double> g) mutable {
                           auto xv = x.data();
                           std::vector<double> gx(d * n);
                           // y = x * r, r = (mean(x^2)+eps)^-1/2
                           // dx = r * g - r^3 / d * x * <g, x>
                           for (std::size_t j = 0; j < n; ++j) {
                             double dot = 0.0;
                             for (std::size_t i = 0; i < d; ++i) dot += g[i * n + j] * xv[i * n + j];
                             const double r = inv[j];
                             const double c = r * r * r * dot / static_cast<double>(d);
                             for (std::size_t i = 0; i < d; ++i)
                               gx[i * n + j] = r * g[i * n + j] - c * xv[i * n + j];
                           }
                           accumulate(x, gx);
                         });
}

Tensor softmax(const Tensor& x, int axis) {
  if (axis != 0 && axis != 1) throw ShapeError("softmax: axis must be 0 or 1");
  const std::size_t r = x.rows(), c = x.cols();
  // A "line" is one column (axis 0) or one row (axis 1).
  const std::size_t lines = axis == 0 ? c : r;
  const std::size_t len = axis == 0 ? r : c;
  auto index = [=](std::size_t line, std::size_t k) {
    return axis == 0 ? k * c + line : line * c + k;
  };
  auto xv = x.data();
  std::vector<double> out(r * c);
  for (std::size_t l = 0; l < lines; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[index(l, k)]);
    double z = 0.0;
    for (std::size_t k = 0; k < len; ++k) z += std::exp(xv[index(l, k)] - mx);
    for (std::size_t k = 0; k < len; ++k) out[index(l, k)] = std::exp(xv[index(l, k)] - mx) / z;
  }
  std::vector<double> saved = out;
  return Tensor::from_op(
      x.shape(), std::move(out), "softmax", {x},
      [x, saved = std::move(saved), lines, len, index](std::span<const double> g) mutable {
        std::vector<double> gx(saved.size());
        for (std::size_t l = 0; l < lines; ++l) {
          double dot = 0.0;
          for (std::size_t k = 0; k < len; ++k) dot += g[index(l, k)] * saved[index(l, k)];
          for (std::size_t k = 0; k < len; ++k) {
            const auto i = index(l, k);
            gx[i] = saved[i] * (g[i] - dot);
          }
        }
        accumulate(x, gx);
      });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, "silu", [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  const std::size_t vocab = table.rows(), d = table.cols(), n = ids.size();
  if (n == 0) throw ShapeError("embedding_lookup: empty id list");
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
  auto tv = table.data();
  std::vector<double> out(d * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < d; ++i) out[i * n + j] = tv[static_cast<std::size_t>(ids[j]) * d + i];
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return Tensor::from_op({d, n}, std::move(out), "embedding_lookup", {table},
                         [table, saved = std::move(saved), d, n](std::span<const double> g) mutable {
                           std::vector<double> gt(table.numel(), 0.0);
                           for (std::size_t j = 0; j < n; ++j)
                             for (std::size_t i = 0; i < d; ++i)
                               gt[static_cast<std::size_t>(saved[j]) * d + i] += g[i * n + j];
                           accumulate(table, gt);
                         });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  const std::size_t vocab = logits.rows(), n = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(n) + " columns");
  }
  for (auto t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) +
                              " outside vocabulary of " + std::to_string(vocab));
    }
  }
  auto lv = logits.data();
  std::vector<double> probs(vocab * n);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < vocab; ++v) mx = std::max(mx, lv[v * n + j]);
    double z = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const double e = std::exp(lv[v * n + j] - mx);
      probs[v * n + j] = e;
      z += e;
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[v * n + j] /= z;
    const auto t = static_cast<std::size_t>(targets[j]);
    total += -(lv[t * n + j] - mx - std::log(z));
  }
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return Tensor::from_op(
      {1}, {total / static_cast<double>(n)}, "cross_entropy", {logits},
      [logits, probs = std::move(probs), saved = std::move(saved), vocab,
       n](std::span<const double> g) mutable {
        std::vector<double> gl(probs);
        for (std::size_t j = 0; j < n; ++j) gl[static_cast<std::size_t>(saved[j]) * n + j] -= 1.0;
        const double scale = g[0] / static_cast<double>(n);
        for (auto& v : gl) v *= scale;
        accumulate(logits, gl);
      });
}

namespace {

struct RopeTable {
  std::vector<double> cos, sin;  // [seq_len x half]
  std::size_t half;
};

RopeTable rope_table(std::size_t head_dim, std::size_t seq_len, double base) {
  RopeTable t;
  t.half = head_dim / 2;
  t.cos.resize(seq_len * t.half);
  t.sin.resize(seq_len * t.half);
  for (std::size_t p = 0; p < seq_len; ++p) {
    for (std::size_t k = 0; k < t.half; ++k) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
      const double angle = static_cast<double>(p) * freq;
      t.cos[p * t.half + k] = std::cos(angle);
      t.sin[p * t.half + k] = std::sin(angle);
    }
  }
  return t;
}

// Rotates pairs (2k, 2k+1) of each head by +angle (sign = 1) or -angle.
void rope_apply(std::span<const double> in, std::span<double> out, std::size_t d, std::size_t n,
                std::size_t n_heads, std::size_t seq_len, const RopeTable& t, double sign) {
  const std::size_t hd = d / n_heads;
  for (std::size_t h = 0; h < n_heads; ++h) {
    for (std::size_t k = 0; k < t.half; ++k) {
      const std::size_t r0 = h * hd + 2 * k, r1 = r0 + 1;
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t p = j % seq_len;
        const double c = t.cos[p * t.half + k], s = sign * t.sin[p * t.half + k];
        const double x0 = in[r0 * n + j], x1 = in[r1 * n + j];
        out[r0 * n + j] = x0 * c - x1 * s;
        out[r1 * n + j] = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace

Tensor rope(const Tensor& x, std::size_t n_heads, std::size_t seq_len, double base) {
  const std::size_t d = x.rows(), n = x.cols();
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw ShapeError("rope: feature dim must split into heads of even size");
  }
  if (seq_len == 0 || n % seq_len != 0) throw ShapeError("rope: columns not a multiple of seq_len");
  auto table = rope_table(d / n_heads, seq_len, base);
  std::vector<double> out(d * n);
  rope_apply(x.data(), out, d, n, n_heads, seq_len, table, 1.0);
  return Tensor::from_op(x.shape(), std::move(out), "rope", {x},
                         [x, table = std::move(table), d, n, n_heads,
                          seq_len](std::span<const double> g) mutable {
                           // Rotation is orthogonal: the adjoint is the inverse rotation.
                           std::vector<double> gx(d * n);
                           rope_apply(g, gx, d, n, n_heads, seq_len, table, -1.0);
                           accumulate(x, gx);
                         });
}

Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads,
                        std::size_t seq_len) {
  require_same_shape(q, k, "causal_attention");
  require_same_shape(q, v, "causal_attention");
  const std::size_t d = q.rows(), n = q.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ShapeError("causal_attention: bad head count");
  if (seq_len == 0 || n % seq_len != 0) {
    throw ShapeError("causal_attention: columns not a multiple of seq_len");
  }
  const std::size_t hd = d / n_heads, batch = n / seq_len, T = seq_len;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  auto qv = q.data(), kv = k.data(), vv = v.data();

  // probs[b][h][i][j], j <= i; upper triangle stays zero.
  std::vector<double> probs(batch * n_heads * T * T, 0.0);
  std::vector<double> out(d * n, 0.0);
  std::vector<double> row(T);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* P = probs.data() + (b * n_heads + h) * T * T;
      for (std::size_t i = 0; i < T; ++i) {
        const std::size_t ci = b * T + i;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const std::size_t cj = b * T + j;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qv[(h * hd + c) * n + ci] * kv[(h * hd + c) * n + cj];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          row[j] = std::exp(row[j] - mx);
          z += row[j];
        }
        for (std::size_t j = 0; j <= i; ++j) P[i * T + j] = row[j] / z;
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0.0;
          for (std::size_t j = 0; j <= i; ++j) acc += P[i * T + j] * vv[(h * hd + c) * n + b * T + j];
          out[(h * hd + c) * n + ci] = acc;
        }
      }
    }
  }

  return Tensor::from_op(
      q.shape(), std::move(out), "causal_attention", {q, k, v},
      [q, k, v, probs = std::move(probs), d, n, hd, n_heads, batch, T,
       scale](std::span<const double> g) mutable {
        auto qv = q.data(), kv = k.data(), vv = v.data();
        std::vector<double> gq(d * n, 0.0), gk(d * n, 0.0), gv(d * n, 0.0);
        std::vector<double> dp(T);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* P = probs.data() + (b * n_heads + h) * T * T;
            for (std::size_t i = 0; i < T; ++i) {
              const std::size_t ci = b * T + i;
              double dot = 0.0;
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t cj = b * T + j;
                double acc = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                  const std::size_t r = h * hd + c;
                  acc += g[r * n + ci] * vv[r * n + cj];
                  gv[r * n + cj] += P[i * T + j] * g[r * n + ci];
                }
                dp[j] = acc;
                dot += acc * P[i * T + j];
              }
              for (std::size_t j = 0; j <= i; ++j) {
                const std::size_t cj = b * T + j;
                const double ds = P[i * T + j] * (dp[j] - dot) * scale;
                for (std::size_t c = 0; c < hd; ++c) {
                  const std::size_t r = h * hd + c;
                  gq[r * n + ci] += ds * kv[r * n + cj];
                  gk[r * n + cj] += ds * qv[r * n + ci];
                }
              }
            }
          }
        }
        accumulate(q, gq);
        accumulate(k, gk);
        accumulate(v, gv);
      });
}

}  // namespace dlqat
