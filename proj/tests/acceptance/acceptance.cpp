// Acceptance suite: one PASS/FAIL line per criterion. Criteria can be
// selected by number on the command line (default: all ten).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dlqat/audit.hpp"
#include "dlqat/corpus.hpp"
#include "dlqat/gradcheck.hpp"
#include "dlqat/ops.hpp"
#include "dlqat/pack.hpp"
#include "dlqat/quant.hpp"
#include "dlqat/trainer.hpp"
#include "support/synthetic_corpus.hpp"

namespace {

using namespace dlqat;

struct Outcome {
  bool pass = false;
  std::string detail;
  bool soft = false;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

QuantSpec random_spec(std::mt19937_64& rng, int bits, std::size_t cols) {
  if (rng() % 2 == 0) return QuantSpec::per_channel(bits);
  std::vector<std::size_t> divisors;
  for (std::size_t g = 1; g <= cols; ++g)
    if (cols % g == 0) divisors.push_back(g);
  return QuantSpec::grouped(bits, divisors[rng() % divisors.size()]);
}

// Scalar quantizer written from its definition, independent of the library.
double scalar_fake_quantize(double w, double s, double b, double m, int bits) {
  const double lo = -std::ldexp(1.0, bits - 1), hi = std::ldexp(1.0, bits - 1) - 1.0;
  const double q = std::clamp(std::nearbyint((w - b) / s), lo, hi);
  return m * (s * q + b);
}

std::size_t group_index(std::size_t r, std::size_t c, std::size_t cols, const QuantSpec& spec) {
  const std::size_t width = spec.is_per_channel() ? cols : *spec.group_size;
  return r * (cols / width) + c / width;
}

struct QuantCase {
  QuantSpec spec;
  Tensor w, s, b, m;
};

QuantCase random_case(std::mt19937_64& rng) {
  const int bits = 2 + static_cast<int>(rng() % 7);
  const std::size_t rows = 1 + rng() % 6, cols = 1 + rng() % 24;
  QuantCase c{random_spec(rng, bits, cols), Tensor::randn({rows, cols}, 1.0, rng), {}, {}, {}};
  auto qp = init_quant_params(c.w, c.spec);
  std::uniform_real_distribution<double> shrink(0.5, 1.3), shift(-0.2, 0.2), mag(0.5, 1.5);
  std::vector<double> s(qp.scale.data().begin(), qp.scale.data().end());
  std::vector<double> b(qp.offset.data().begin(), qp.offset.data().end());
  std::vector<double> m(s.size());
  for (std::size_t g = 0; g < s.size(); ++g) {
    s[g] *= shrink(rng);
    b[g] += shift(rng) * s[g];
    m[g] = mag(rng);
  }
  c.s = Tensor(qp.scale.shape(), s, true);
  c.b = Tensor(qp.offset.shape(), b, true);
  c.m = Tensor(qp.scale.shape(), m, true);
  c.w = Tensor(c.w.shape(), std::vector<double>(c.w.data().begin(), c.w.data().end()), true);
  return c;
}

Outcome criterion1() {
  std::mt19937_64 rng(101);
  std::size_t cases = 0, mismatches = 0, elements = 0;
  std::set<int> bits_seen;
  std::set<bool> granularity_seen;
  for (; cases < 1200; ++cases) {
    QuantCase c = random_case(rng);
    bits_seen.insert(c.spec.bits);
    granularity_seen.insert(c.spec.is_per_channel());
    const bool with_m = cases % 2 == 0;
    NoGradGuard ng;
    const Tensor got = fake_quantize(c.w, c.s, c.b, with_m ? c.m : Tensor(), c.spec);
    for (std::size_t r = 0; r < c.w.rows(); ++r) {
      for (std::size_t col = 0; col < c.w.cols(); ++col) {
        const std::size_t g = group_index(r, col, c.w.cols(), c.spec);
        const double ref = scalar_fake_quantize(c.w.at(r, col), c.s.at(g), c.b.at(g), with_m ? c.m.at(g) : 1.0,
                                                c.spec.bits);
        ++elements;
        if (got.at(r, col) != ref) ++mismatches;
      }
    }
  }
  const bool pass = mismatches == 0 && bits_seen.size() == 7 && granularity_seen.size() == 2;
  return {pass, std::to_string(cases) + " cases, " + std::to_string(elements) + " elements, bits 2-8, both granularities, " +
                    std::to_string(mismatches) + " mismatches"};
}

Outcome criterion2() {
  std::mt19937_64 rng(202);
  std::size_t failures = 0, values = 0;
  std::uniform_real_distribution<double> sd(1e-3, 3.0), bd(-2.0, 2.0);
  for (int bits = 2; bits <= 8; ++bits) {
    for (int trial = 0; trial < 50; ++trial) {
      const int qn = -(1 << (bits - 1)), qp = (1 << (bits - 1)) - 1;
      const std::size_t cols = static_cast<std::size_t>(qp - qn + 1);
      const auto spec = trial % 2 ? QuantSpec::per_channel(bits) : QuantSpec::grouped(bits, cols / 2);
      const std::size_t groups = spec.groups_per_row(cols);
      std::vector<double> s(groups), b(groups);
      for (std::size_t g = 0; g < groups; ++g) {
        s[g] = sd(rng);
        b[g] = bd(rng);
      }
      std::vector<std::int32_t> grid(cols);
      for (std::size_t i = 0; i < cols; ++i) grid[i] = qn + static_cast<int>(i);
      const Tensor st({1, groups}, s), bt({1, groups}, b);
      const Tensor w = dequantize(grid, {1, cols}, st, bt, Tensor(), spec);
      const auto back = quantize_ints(w, st, bt, spec);
      for (std::size_t i = 0; i < cols; ++i, ++values) failures += back[i] != grid[i];
    }
  }
  return {failures == 0, std::to_string(values) + " grid values over 350 random (s, b) draws, " +
                             std::to_string(failures) + " not recovered"};
}

Outcome criterion3() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> d(-5.0, 5.0);
  double worst = 0.0;
  for (int i = 0; i < 2000; ++i) {
    const int bits = 2 + i % 7;
    double lo = d(rng), hi = d(rng);
    if (lo > hi) std::swap(lo, hi);
    if (lo == hi) continue;
    const auto so = init_scale_bias(lo, hi, bits);
    const double qn = -std::ldexp(1.0, bits - 1), qp = std::ldexp(1.0, bits - 1) - 1.0;
    worst = std::max({worst, std::abs(so.scale * qn + so.offset - lo), std::abs(so.scale * qp + so.offset - hi)});
  }
  const auto unit = init_scale_bias(-1.0, 1.0, 4);
  const double es = std::abs(unit.scale - 2.0 / 15.0), eb = std::abs(unit.offset - 1.0 / 15.0);
  const bool pass = worst <= 1e-6 && es <= 1e-12 && eb <= 1e-12;
  return {pass, "endpoint error " + fmt("%.2e", worst) + " over 2000 ranges; (-1, 1, 4 bits) -> s " +
                    fmt("%.17g", unit.scale) + ", b " + fmt("%.17g", unit.offset)};
}

// Closed-form straight-through gradients, evaluated element by element here
// and compared with what autodiff produces through fake_quantize.
bool ste_matches(const QuantCase& c, std::mt19937_64& rng) {
  const std::size_t n = c.w.numel();
  std::vector<double> up(n);
  std::normal_distribution<double> nd;
  for (double& u : up) u = nd(rng);
  const Tensor upstream(c.w.shape(), up);
  backward(sum(mul(fake_quantize(c.w, c.s, c.b, c.m, c.spec), upstream)));

  const int bits = c.spec.bits;
  const double lo = -std::ldexp(1.0, bits - 1), hi = std::ldexp(1.0, bits - 1) - 1.0;
  std::vector<double> dw(n, 0.0), ds(c.s.numel(), 0.0), db(c.s.numel(), 0.0), dm(c.s.numel(), 0.0);
  for (std::size_t r = 0; r < c.w.rows(); ++r) {
    for (std::size_t col = 0; col < c.w.cols(); ++col) {
      const std::size_t i = r * c.w.cols() + col, g = group_index(r, col, c.w.cols(), c.spec);
      const double s = c.s.at(g), b = c.b.at(g), m = c.m.at(g);
      const double u = (c.w.at(i) - b) / s;
      const double q = std::clamp(std::nearbyint(u), lo, hi);
      const double mg = m * up[i];
      if (lo <= u && u <= hi) {
        dw[i] = mg;
        ds[g] += mg * (q - u);
      } else {
        ds[g] += mg * q;
        db[g] += mg;
      }
      dm[g] += up[i] * (s * q + b);
    }
  }
  auto same = [](const Tensor& t, const std::vector<double>& ref) {
    return std::equal(t.grad().begin(), t.grad().end(), ref.begin(), ref.end());
  };
  return same(c.w, dw) && same(c.s, ds) && same(c.b, db) && same(c.m, dm);
}

Outcome criterion4() {
  const GradcheckReport report = run_gradcheck(404, 40);
  double smooth_worst = 0.0, magnitude_err = 0.0;
  bool all = true;
  for (const auto& e : report.entries) {
    all = all && e.passed;
    if (e.name == "fake_quantize.magnitude") {
      magnitude_err = e.max_error;
    } else if (e.method == "finite-difference") {
      smooth_worst = std::max(smooth_worst, e.max_error);
    }
  }
  all = all && smooth_worst <= kSmoothTolerance && magnitude_err <= kMagnitudeTolerance;

  std::mt19937_64 rng(405);
  std::size_t exact = 0;
  const std::size_t ste_cases = 300;
  for (std::size_t i = 0; i < ste_cases; ++i) exact += ste_matches(random_case(rng), rng);
  const bool pass = all && exact == ste_cases;
  return {pass, std::to_string(report.entries.size()) + " checks; smooth max rel err " + fmt("%.2e", smooth_worst) +
                    " (tol 1e-4), m " + fmt("%.2e", magnitude_err) + " (tol 1e-5), W/s/b/m STE exact in " +
                    std::to_string(exact) + "/" + std::to_string(ste_cases) + " cases"};
}

TinyLMConfig toy(AblationSetting setting = AblationSetting::S5, int bits = 4) {
  TinyLMConfig c;  // 2 layers, d_model 64
  c.setting = setting;
  c.spec = QuantSpec::per_channel(bits);
  return c;
}

const Corpus& big_corpus() {
  static const Corpus c = corpus_from_bytes(testing::synthetic_text(120000), 0.9);
  return c;
}

std::set<std::string> as_set(const std::vector<std::string>& v) { return {v.begin(), v.end()}; }

Outcome criterion5() {
  using S = std::set<std::string>;
  const std::size_t warmup = 15, total = 30;
  TrainConfig tc;
  tc.batch_size = 2;
  tc.learning_rate = 1e-3;
  tc.warmup_sb_iters = warmup;
  tc.total_iters = total;
  tc.eval_initial = false;

  TinyLM model(toy());
  const auto rep = run_training(model, big_corpus(), tc);
  std::size_t warm_ok = 0, main_ok = 0;
  bool first_main_ok = false;
  for (const auto& r : rep.records) {
    const S changed = as_set(r.changed);
    if (r.iter <= warmup) {
      warm_ok += changed == S{"s", "b"};
    } else if (r.iter == warmup + 1) {
      // B = 0 at the start of the main phase, so dL/dA = 0 for one step.
      first_main_ok = changed == S{"m", "B"} && r.grad_norms.at("A") == 0.0 && r.grad_norms.at("B") > 0.0;
    } else {
      main_ok += changed == S{"m", "A", "B"};
    }
  }
  const bool schedule = warm_ok == warmup && first_main_ok && main_ok == total - warmup - 1 &&
                        rep.sb_frozen_constant.value_or(false);

  std::size_t frozen_ok = 0;
  for (int i = 1; i <= 6; ++i) {
    TinyLM m(toy(setting_from_index(i)));
    const auto before = fingerprint_model(m);
    TrainConfig t = tc;
    t.total_iters = 12;
    t.warmup_sb_iters = 6;
    const auto r = run_training(m, big_corpus(), t);
    const auto after = fingerprint_model(m);
    bool ok = before.at("W0") == after.at("W0");
    for (const auto& rec : r.records) ok = ok && std::count(rec.changed.begin(), rec.changed.end(), "W0") == 0;
    frozen_ok += ok;
  }
  const bool pass = schedule && frozen_ok == 6;
  return {pass, "S5 iters 1-" + std::to_string(warmup) + " changed {s,b}: " + std::to_string(warm_ok) + "/" +
                    std::to_string(warmup) + "; iter " + std::to_string(warmup + 1) + " changed {m,B} with dA = 0 " +
                    "(B starts at 0): " + (first_main_ok ? "yes" : "no") + "; later iters changed {m,A,B}: " +
                    std::to_string(main_ok) + "/" + std::to_string(total - warmup - 1) +
                    "; W0 unchanged in " + std::to_string(frozen_ok) + "/6 settings"};
}

Outcome criterion6() {
  // Learnable-params column of the ablation table, row by row.
  const std::vector<std::string> column = {"A,B",   "s,b then A,B",   "s,b,A,B",
                                           "m,A,B", "s,b then m,A,B", "m,s,b,A,B"};
  auto parse = [](const std::string& list) {
    std::set<std::string> out;
    std::stringstream ss(list);
    for (std::string tok; std::getline(ss, tok, ',');) out.insert(tok);
    return out;
  };
  auto labels = [](const ParamSet& p) {
    std::set<std::string> out;
    for (auto k : p.kinds()) out.insert(std::string(param_kind_label(k)));
    return out;
  };
  int matched = 0;
  for (int i = 1; i <= 6; ++i) {
    const auto s = setting_from_index(i);
    const std::string& row = column[i - 1];
    const auto split = row.find(" then ");
    std::set<std::string> warm, main;
    if (split != std::string::npos) {
      warm = parse(row.substr(0, split));
      main = parse(row.substr(split + 6));
    } else {
      main = parse(row);
      // Learned-clip rows still run a warm-up on s, b; fixed-clip rows do not.
      warm = traits(s).clip == ClipMode::Learn ? std::set<std::string>{"s", "b"} : main;
    }
    matched += labels(trainable_set(s, Phase::Warmup)) == warm && labels(trainable_set(s, Phase::Main)) == main;
  }
  return {matched == 6, std::to_string(matched) + "/6 rows match for warm-up and main phases"};
}

Outcome criterion7() {
  const auto a7 = audit_params(catalog_entry("llama-7b"), QuantSpec::per_channel(4), 16);
  const auto a13 = audit_params(catalog_entry("llama-13b"), QuantSpec::per_channel(4), 16);
  const double m7 = static_cast<double>(a7.count_m + a7.count_ab) / 1e6;
  const double m13 = static_cast<double>(a13.count_m + a13.count_ab) / 1e6;
  const bool pass = std::abs(m7 - 41.0) <= 0.05 * 41.0 && std::abs(m13 - 65.0) <= 0.05 * 65.0 &&
                    a7.fraction_of_total < 0.01;
  return {pass, "7B m+A+B " + fmt("%.2f", m7) + "M (41M +-5%), 13B " + fmt("%.2f", m13) +
                    "M (65M +-5%), 7B trainable fraction " + fmt("%.3f", 100.0 * a7.fraction_of_total) + "%"};
}

Outcome criterion8() {
  std::vector<std::int32_t> tokens(2 * 64);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = big_corpus().eval()[i];
  int ok = 0, total = 0;
  std::string worst;
  for (int bits : {3, 4}) {
    for (bool grouped : {false, true}) {
      ++total;
      TinyLMConfig cfg = toy(AblationSetting::S5, bits);
      if (grouped) cfg.spec = QuantSpec::grouped(bits, 16);
      TinyLM model(cfg);
      TrainConfig tc;
      tc.batch_size = 2;
      tc.learning_rate = 1e-2;
      tc.warmup_sb_iters = 4;
      tc.total_iters = 10;
      tc.eval_initial = false;
      run_training(model, big_corpus(), tc);

      const PackFile contents = pack_contents(model);
      const auto bytes = serialize_pack(contents);
      const PackFile back = unpack_model(bytes);
      const bool lossless = back == contents && serialize_pack(back) == bytes;

      const Tensor ref = model.forward(tokens, 64);
      TinyLM rebuilt(cfg);
      load_packed_weights(rebuilt, back);
      const Tensor got = rebuilt.forward(tokens, 64);
      bool forward_equal = std::equal(ref.data().begin(), ref.data().end(), got.data().begin(), got.data().end());

      // Layer level: packed matmul against the in-memory fake-quantized layer.
      std::mt19937_64 rng(8);
      for (auto& nl : model.linears()) {
        const Tensor x = Tensor::randn({nl.layer->in_features(), 5}, 1.0, rng);
        const Tensor a = packed_linear_forward(back, nl.name, x);
        const Tensor b = nl.layer->forward(x, Phase::Main);
        forward_equal = forward_equal && std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end());
      }
      if (lossless && forward_equal) {
        ++ok;
      } else {
        worst += " " + cfg.spec.describe();
      }
    }
  }
  return {ok == total, std::to_string(ok) + "/" + std::to_string(total) +
                           " configurations (3/4 bit x per-channel/group 16) lossless with bit-identical logits" +
                           (worst.empty() ? "" : "; failing:" + worst)};
}

Outcome criterion9() {
  const Corpus& data = big_corpus();
  TrainConfig tc;  // batch 16, lr 2e-4
  tc.total_iters = 2000;
  tc.warmup_sb_iters = 200;
  tc.seed = 9;
  tc.track_changes = false;
  TinyLMConfig mc = toy();
  mc.seed = 9;
  TinyLM model(mc);
  const auto rep = run_training(model, data, tc);
  const double p0 = rep.initial_eval->ppl, p1 = rep.final_eval.ppl;
  const double reduction = 1.0 - p1 / p0;

  // Determinism: an independent rerun of the first 300 iterations (crossing
  // the phase boundary) must reproduce every loss bit for bit.
  TinyLM again(mc);
  TrainConfig prefix = tc;
  prefix.stop_after = 300;
  prefix.eval_initial = false;
  const auto rerun = run_training(again, data, prefix);
  bool deterministic = rerun.records.size() == 300;
  for (std::size_t i = 0; deterministic && i < rerun.records.size(); ++i) {
    deterministic = rerun.records[i].loss == rep.records[i].loss;
  }
  const bool pass = reduction >= 0.30 && deterministic;
  return {pass, std::to_string(data.ids.size() / 1000) + " KB corpus, 4-bit S5, 2000 iters: eval ppl " +
                    fmt("%.2f", p0) + " -> " + fmt("%.2f", p1) + " (" + fmt("%.1f", 100.0 * reduction) +
                    "% lower; uniform predictor 256), 300-iter rerun " +
                    (deterministic ? "bit-identical" : "DIFFERS") + ", " + fmt("%.3f", rep.seconds_per_iter) +
                    " s/iter"};
}

// Runs all six settings at 3 bits over five seeds with the given warm-up.
AblationReport small_ablation(std::size_t warmup) {
  TinyLMConfig base;
  base.d_model = 32;
  base.n_heads = 4;
  base.ffn_hidden = 96;
  base.context_length = 32;
  base.rank = 8;
  TrainConfig tc;
  tc.batch_size = 8;
  tc.learning_rate = 1e-3;
  tc.total_iters = 500;
  tc.warmup_sb_iters = warmup;
  tc.track_changes = false;
  ModelFactory factory = [base](AblationSetting s, int bits, std::uint64_t seed) {
    TinyLMConfig c = base;
    c.setting = s;
    c.spec = QuantSpec::per_channel(bits);
    c.seed = seed;
    return TinyLM(c);
  };
  return run_ablation(factory, big_corpus(), tc, {3}, {0, 1, 2, 3, 4});
}

std::string ordering_summary(const AblationReport& rep) {
  const double s1 = rep.row(AblationSetting::S1, 3).mean_loss, s2 = rep.row(AblationSetting::S2, 3).mean_loss,
               s5 = rep.row(AblationSetting::S5, 3).mean_loss;
  const bool ordered = rep.s5_le_s1.value_or(false) && rep.s5_le_s2.value_or(false);
  return "S5 " + fmt("%.4f", s5) + ", S1 " + fmt("%.4f", s1) + ", S2 " + fmt("%.4f", s2) +
         (ordered ? " (S5 <= S1, S2 holds)" : " (DEVIATION: S5 not <= both S1 and S2)");
}

Outcome criterion10() {
  // Warm-up takes a fifth of the budget, the same ratio as 1000 of 5000.
  const AblationReport main_run = small_ablation(100);
  std::cout << "3-bit ablation, 500 iterations, warm-up 100:\n" << main_run.table();
  // Sensitivity: settings without a warm-up get every iteration for A, B,
  // so the ordering depends on how much of the budget the warm-up takes.
  const AblationReport short_warmup = small_ablation(50);
  std::cout << "3-bit ablation, 500 iterations, warm-up 50:\n" << short_warmup.table();
  return {true, "5 seeds, 3 bits, mean eval loss; warm-up 100/500: " + ordering_summary(main_run) +
                    "; warm-up 50/500: " + ordering_summary(short_warmup),
          true};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::function<Outcome()>> criteria = {criterion1, criterion2, criterion3, criterion4, criterion5,
                                                          criterion6, criterion7, criterion8, criterion9, criterion10};
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.push_back(i);

  int failures = 0;
  for (int n : selected) {
    if (n < 1 || n > 10) {
      std::cerr << "no criterion " << n << '\n';
      return 2;
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[n - 1]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << (o.soft ? " (reported, soft)" : "")
              << " - " << o.detail << " [" << fmt("%.1f", secs) << " s]" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
