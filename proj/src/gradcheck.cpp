#include "dlqat/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "dlqat/adapter.hpp"
#include "dlqat/ops.hpp"
#include "dlqat/quant.hpp"

namespace dlqat {

bool GradcheckReport::passed() const {
  return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed; });
}

double fd_relative_error(const LossFn& loss, std::vector<Tensor>& inputs, double h) {
  for (auto& t : inputs) t.clear_grad();
  backward(loss(inputs));
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.numel());
    {
      NoGradGuard no_grad;
      auto data = t.mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + h;
        const double up = loss(inputs).item();
        data[i] = orig - h;
        const double down = loss(inputs).item();
        data[i] = orig;
        numeric[i] = (up - down) / (2.0 * h);
      }
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
    worst = std::max(worst, std::sqrt(diff) / denom);
    t.clear_grad();
  }
  return worst;
}

namespace {

Tensor uniform(Shape shape, double lo, double hi, std::mt19937_64& rng, bool grad = true) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), grad);
}

Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.5, 2.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = sign(rng) ? mag(rng) : -mag(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

/// Projects an op output onto fixed random weights so it becomes a scalar.
Tensor project(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

struct SmoothCase {
  std::string name;
  std::function<std::pair<std::vector<Tensor>, LossFn>(std::mt19937_64&)> make;
};

std::vector<SmoothCase> smooth_cases() {
  std::vector<SmoothCase> cases;
  auto unary_case = [&cases](std::string name, Shape shape, std::function<Tensor(const Tensor&)> op) {
    cases.push_back({name, [shape, op](std::mt19937_64& rng) {
                       std::vector<Tensor> in{uniform(shape, -1.5, 1.5, rng)};
                       Shape out_shape;
                       {
                         NoGradGuard no_grad;
                         out_shape = op(in[0]).shape();
                       }
                       Tensor w = uniform(out_shape, -1, 1, rng, false);
                       LossFn f = [op, w](const std::vector<Tensor>& x) { return project(op(x[0]), w); };
                       return std::make_pair(in, f);
                     }});
  };
  auto binary_case = [&cases](std::string name, Shape sa, Shape sb, bool nonzero_b,
                              std::function<Tensor(const Tensor&, const Tensor&)> op, Shape out) {
    cases.push_back({name, [=](std::mt19937_64& rng) {
                       Tensor w = uniform(out, -1, 1, rng, false);
                       std::vector<Tensor> in{uniform(sa, -1.5, 1.5, rng),
                                              nonzero_b ? away_from_zero(sb, rng) : uniform(sb, -1.5, 1.5, rng)};
                       LossFn f = [op, w](const std::vector<Tensor>& x) { return project(op(x[0], x[1]), w); };
                       return std::make_pair(in, f);
                     }});
  };

  binary_case("matmul", {3, 4}, {4, 5}, false, [](auto& a, auto& b) { return matmul(a, b); }, {3, 5});
  unary_case("transpose", {3, 4}, [](auto& a) { return transpose(a); });
  binary_case("add", {3, 4}, {3, 4}, false, [](auto& a, auto& b) { return add(a, b); }, {3, 4});
  binary_case("sub", {3, 4}, {3, 4}, false, [](auto& a, auto& b) { return sub(a, b); }, {3, 4});
  binary_case("mul", {3, 4}, {3, 4}, false, [](auto& a, auto& b) { return mul(a, b); }, {3, 4});
  binary_case("div", {3, 4}, {3, 4}, true, [](auto& a, auto& b) { return div(a, b); }, {3, 4});
  binary_case("broadcast_mul_column", {4, 6}, {4, 1}, false,
              [](auto& a, auto& b) { return broadcast_mul(a, b); }, {4, 6});
  binary_case("broadcast_mul_row", {4, 6}, {1, 6}, false,
              [](auto& a, auto& b) { return broadcast_mul(a, b); }, {4, 6});
  unary_case("scalar_ops", {3, 4}, [](auto& a) { return add_scalar(mul_scalar(a, -1.7), 0.3); });
  unary_case("mean", {3, 4}, [](auto& a) { return mean(mul(a, a)); });
  unary_case("rmsnorm", {6, 5}, [](auto& a) { return rmsnorm(a); });
  unary_case("softmax_axis0", {4, 5}, [](auto& a) { return softmax(a, 0); });
  unary_case("softmax_axis1", {4, 5}, [](auto& a) { return softmax(a, 1); });
  unary_case("silu", {3, 4}, [](auto& a) { return silu(a); });
  unary_case("rope", {8, 6}, [](auto& a) { return rope(a, 2, 3); });

  cases.push_back({"embedding_lookup", [](std::mt19937_64& rng) {
                     const std::vector<std::int32_t> ids{3, 0, 6, 3, 1};
                     Tensor w = uniform({3, 5}, -1, 1, rng, false);
                     std::vector<Tensor> in{uniform({7, 3}, -1, 1, rng)};
                     LossFn f = [ids, w](const std::vector<Tensor>& x) {
                       return project(embedding_lookup(x[0], ids), w);
                     };
                     return std::make_pair(in, f);
                   }});
  cases.push_back({"cross_entropy", [](std::mt19937_64& rng) {
                     std::vector<std::int32_t> targets(5);
                     for (auto& t : targets) t = static_cast<std::int32_t>(rng() % 6);
                     std::vector<Tensor> in{uniform({6, 5}, -2, 2, rng)};
                     LossFn f = [targets](const std::vector<Tensor>& x) { return cross_entropy(x[0], targets); };
                     return std::make_pair(in, f);
                   }});
  cases.push_back({"causal_attention", [](std::mt19937_64& rng) {
                     Tensor w = uniform({8, 6}, -1, 1, rng, false);
                     std::vector<Tensor> in{uniform({8, 6}, -1, 1, rng), uniform({8, 6}, -1, 1, rng),
                                            uniform({8, 6}, -1, 1, rng)};
                     LossFn f = [w](const std::vector<Tensor>& x) {
                       return project(causal_attention(x[0], x[1], x[2], 2, 3), w);
                     };
                     return std::make_pair(in, f);
                   }});
  cases.push_back({"lora_effective_weight", [](std::mt19937_64& rng) {
                     Tensor w0 = uniform({6, 8}, -1, 1, rng, false);
                     Tensor w = uniform({6, 8}, -1, 1, rng, false);
                     std::vector<Tensor> in{uniform({2, 8}, -1, 1, rng), uniform({6, 2}, -1, 1, rng)};
                     LossFn f = [w0, w](const std::vector<Tensor>& x) {
                       return project(add(w0, mul_scalar(matmul(x[1], x[0]), 2.0)), w);
                     };
                     return std::make_pair(in, f);
                   }});
  cases.push_back({"composite_mlp", [](std::mt19937_64& rng) {
                     Tensor x = uniform({6, 4}, -1, 1, rng, false);
                     std::vector<std::int32_t> targets{1, 4, 0, 2};
                     std::vector<Tensor> in{uniform({8, 6}, -0.5, 0.5, rng), uniform({5, 8}, -0.5, 0.5, rng)};
                     LossFn f = [x, targets](const std::vector<Tensor>& p) {
                       Tensor h = silu(matmul(p[0], rmsnorm(x)));
                       return cross_entropy(matmul(p[1], h), targets);
                     };
                     return std::make_pair(in, f);
                   }});
  return cases;
}

// Element-by-element evaluation of the straight-through rules, written
// independently of the vectorized quantizer.
struct ClosedForm {
  std::vector<double> dw, ds, db, dm;
};

ClosedForm closed_form_ste(const Tensor& w, const Tensor& s, const Tensor& b, const Tensor& m,
                           const QuantSpec& spec, const Tensor& upstream) {
  const std::size_t rows = w.rows(), cols = w.cols();
  const std::size_t width = spec.group_width(cols), per_row = cols / width;
  const double lo = spec.qmin(), hi = spec.qmax();
  ClosedForm cf;
  cf.dw.assign(rows * cols, 0.0);
  cf.ds.assign(rows * per_row, 0.0);
  cf.db.assign(rows * per_row, 0.0);
  cf.dm.assign(rows * per_row, 0.0);
  for (std::size_t g = 0; g < rows * per_row; ++g) {
    const std::size_t r = g / per_row, c0 = (g % per_row) * width;
    const double sg = s.data()[g], bg = b.data()[g], mg = m.data()[g];
    for (std::size_t c = c0; c < c0 + width; ++c) {
      const double x = w.data()[r * cols + c];
      const double up = upstream.data()[r * cols + c];
      const double u = (x - bg) / sg;
      double q = std::nearbyint(u);
      q = q < lo ? lo : (q > hi ? hi : q);
      const bool inside = lo <= u && u <= hi;
      cf.dw[r * cols + c] = inside ? mg * up : 0.0;
      cf.ds[g] += inside ? mg * up * (q - u) : mg * up * q;
      cf.db[g] += inside ? 0.0 : mg * up;
      cf.dm[g] += up * (sg * q + bg);
    }
  }
  return cf;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

QuantSpec random_spec(std::mt19937_64& rng, std::size_t cols) {
  const int bits = 2 + static_cast<int>(rng() % 7);
  if (rng() % 2 == 0) return QuantSpec::per_channel(bits);
  std::vector<std::size_t> divisors;
  for (std::size_t g = 1; g <= cols; ++g)
    if (cols % g == 0) divisors.push_back(g);
  return QuantSpec::grouped(bits, divisors[rng() % divisors.size()]);
}

/// Random quantizer state with scale shrunk so part of each group clips.
struct QuantCase {
  Tensor w, s, b, m, upstream;
  QuantSpec spec;
};

QuantCase random_quant_case(std::mt19937_64& rng) {
  const std::size_t rows = 1 + rng() % 5, cols = 2 * (1 + rng() % 6);
  QuantCase qc;
  qc.spec = random_spec(rng, cols);
  qc.w = uniform({rows, cols}, -1, 1, rng);
  auto init = init_quant_params(qc.w, qc.spec);
  std::uniform_real_distribution<double> shrink(0.6, 1.2), shift(-0.1, 0.1), mag(0.5, 1.5);
  std::vector<double> s(init.scale.data().begin(), init.scale.data().end());
  std::vector<double> b(init.offset.data().begin(), init.offset.data().end());
  std::vector<double> m(s.size());
  for (std::size_t g = 0; g < s.size(); ++g) {
    s[g] *= shrink(rng);
    b[g] += shift(rng);
    m[g] = mag(rng);
  }
  const Shape ps = init.scale.shape();
  qc.s = Tensor(ps, s, true);
  qc.b = Tensor(ps, b, true);
  qc.m = Tensor(ps, m, true);
  qc.upstream = uniform({rows, cols}, -1, 1, rng, false);
  return qc;
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed, std::size_t points) {
  GradcheckReport report;
  std::mt19937_64 rng(seed);

  for (const auto& c : smooth_cases()) {
    GradcheckEntry e{c.name, "finite-difference", points, 0.0, kSmoothTolerance, false};
    for (std::size_t p = 0; p < points; ++p) {
      auto [inputs, fn] = c.make(rng);
      e.max_error = std::max(e.max_error, fd_relative_error(fn, inputs));
    }
    e.passed = e.max_error <= e.tolerance;
    report.entries.push_back(e);
  }

  {
    GradcheckEntry e{"fake_quantize.magnitude", "finite-difference", points, 0.0, kMagnitudeTolerance, false};
    for (std::size_t p = 0; p < points; ++p) {
      auto qc = random_quant_case(rng);
      qc.w.set_requires_grad(false);
      qc.s.set_requires_grad(false);
      qc.b.set_requires_grad(false);
      std::vector<Tensor> inputs{qc.m};
      LossFn fn = [&qc](const std::vector<Tensor>& x) {
        return project(fake_quantize(qc.w, qc.s, qc.b, x[0], qc.spec), qc.upstream);
      };
      e.max_error = std::max(e.max_error, fd_relative_error(fn, inputs));
    }
    e.passed = e.max_error <= e.tolerance;
    report.entries.push_back(e);
  }

  {
    GradcheckEntry e{"fake_quantize.ste_w_s_b", "closed-form", points, 0.0, 0.0, false};
    for (std::size_t p = 0; p < points; ++p) {
      auto qc = random_quant_case(rng);
      backward(project(fake_quantize(qc.w, qc.s, qc.b, qc.m, qc.spec), qc.upstream));
      const auto cf = closed_form_ste(qc.w, qc.s, qc.b, qc.m, qc.spec, qc.upstream);
      e.max_error = std::max({e.max_error, max_abs_diff(qc.w.grad(), cf.dw),
                              max_abs_diff(qc.s.grad(), cf.ds), max_abs_diff(qc.b.grad(), cf.db),
                              max_abs_diff(qc.m.grad(), cf.dm)});
    }
    e.passed = e.max_error == 0.0;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace dlqat
