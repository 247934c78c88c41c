#include <gtest/gtest.h>

#include <cmath>

#include "dlqat/ops.hpp"
#include "dlqat/optim.hpp"

namespace dlqat {
namespace {

// Scalar AdamW written out independently of the optimizer.
struct ScalarAdam {
  double p, m = 0.0, v = 0.0;
  int t = 0;
  void step(double g, double lr, double wd) {
    ++t;
    p -= lr * wd * p;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    p -= lr * mh / (std::sqrt(vh) + 1e-8);
  }
};

TEST(AdamW, MatchesScalarOracleOverManySteps) {
  for (double wd : {0.0, 0.1}) {
    Tensor x({1, 3}, {0.5, -1.0, 2.0}, true);
    AdamWOptions o;
    o.weight_decay = wd;
    AdamW opt({{"x", x}}, o);
    std::vector<ScalarAdam> ref{{0.5}, {-1.0}, {2.0}};
    for (int it = 0; it < 50; ++it) {
      // loss = sum(x^3) / 3 + sum(x): gradient x^2 + 1
      std::vector<double> g;
      for (double v : x.data()) g.push_back(v * v + 1.0);
      opt.zero_grad();
      backward(add(mul_scalar(sum(mul(mul(x, x), x)), 1.0 / 3.0), sum(x)));
      for (std::size_t i = 0; i < 3; ++i) ASSERT_NEAR(x.grad()[i], g[i], 1e-12);
      opt.step(1e-2);
      for (std::size_t i = 0; i < 3; ++i) {
        ref[i].step(g[i], 1e-2, wd);
        EXPECT_NEAR(x.at(i), ref[i].p, 1e-12) << "step " << it << " elem " << i;
      }
    }
    EXPECT_EQ(opt.step_count(), 50u);
  }
}

TEST(AdamW, ZeroGradientLeavesParameterUnchanged) {
  Tensor x({1, 2}, {0.3, -0.7}, true);
  Tensor w({1, 2}, {0.0, 0.0});
  AdamW opt({{"x", x}});
  for (int it = 0; it < 5; ++it) {
    opt.zero_grad();
    backward(sum(mul(x, w)));
    opt.step(0.1);
  }
  EXPECT_EQ(x.at(0), 0.3);
  EXPECT_EQ(x.at(1), -0.7);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
  Tensor x({1, 2}, {1.0, 1.0}, true);
  Tensor w({1, 2}, {3.0, -0.01});
  AdamW opt({{"x", x}});
  backward(sum(mul(x, w)));
  opt.step(0.05);
  // Bias-corrected first step is lr * sign(g) up to eps.
  EXPECT_NEAR(x.at(0), 0.95, 1e-8);
  EXPECT_NEAR(x.at(1), 1.05, 1e-6);
}

TEST(AdamW, MissingGradientThrows) {
  Tensor x({1, 2}, {1.0, 2.0}, true);
  Tensor y({1, 2}, {1.0, 2.0}, true);
  AdamW opt({{"x", x}, {"y", y}});
  backward(sum(x));
  EXPECT_THROW(opt.step(0.1), GraphError);
}

}  // namespace
}  // namespace dlqat
