#include "dlqat/trainer.hpp"

#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "dlqat/quant.hpp"

namespace dlqat {

void TrainConfig::validate(AblationSetting setting) const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("train config: " + msg); };
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (total_iters < 1) fail("total_iters must be >= 1");
  if (stop_after && *stop_after < 1) fail("stop_after must be >= 1");
  if (traits(setting).clip == ClipMode::LearnThenFix && warmup_sb_iters >= total_iters) {
    fail("warmup_sb_iters must be < total_iters for learn-then-fix clipping");
  }
}

namespace {

std::uint64_t fnv1a(std::span<const double> values, std::uint64_t h = 1469598103934665603ULL) {
  const auto* bytes = reinterpret_cast<const unsigned char*>(values.data());
  for (std::size_t i = 0; i < values.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::string kind_of_slot(const std::string& name) { return name.substr(name.rfind('.') + 1); }

std::vector<std::pair<std::string, Tensor>> trainable_tensors(TinyLM& model) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (auto& nl : model.linears()) {
    for (auto kind : kAllParamKinds) {
      Tensor& t = nl.layer->param(kind);
      if (t.requires_grad()) out.emplace_back(nl.name + "." + std::string(param_kind_label(kind)), t);
    }
  }
  return out;
}

}  // namespace

Fingerprints fingerprint_model(TinyLM& model) {
  Fingerprints fp;
  auto mix = [&fp](const std::string& key, const Tensor& t) {
    auto it = fp.find(key);
    fp[key] = fnv1a(t.data(), it == fp.end() ? 1469598103934665603ULL : it->second);
  };
  for (auto& nl : model.linears()) {
    mix("W0", nl.layer->base_weight());
    const bool derived_sb = traits(nl.layer->setting()).clip == ClipMode::MinMax;
    for (auto kind : kAllParamKinds) {
      if (derived_sb && (kind == ParamKind::Scale || kind == ParamKind::Offset)) continue;
      mix(std::string(param_kind_label(kind)), nl.layer->param(kind));
    }
  }
  mix("embed", model.embedding());
  mix("head", model.head());
  return fp;
}

Batch sample_batch(std::span<const std::int32_t> train, std::size_t batch, std::size_t seq_len,
                   std::mt19937_64& rng) {
  if (train.size() <= seq_len) throw DataError("training split is shorter than one context window");
  const std::size_t starts = train.size() - seq_len;
  Batch b;
  b.inputs.reserve(batch * seq_len);
  b.targets.reserve(batch * seq_len);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = static_cast<std::size_t>(rng() % starts);
    b.inputs.insert(b.inputs.end(), train.begin() + s, train.begin() + s + seq_len);
    b.targets.insert(b.targets.end(), train.begin() + s + 1, train.begin() + s + seq_len + 1);
  }
  return b;
}

TrainingReport run_training(TinyLM& model, const Corpus& data, const TrainConfig& config) {
  const auto& mc = model.config();
  config.validate(mc.setting);
  if (data.eval().empty() || data.train().empty()) throw DataError("corpus split is empty");
  const auto start_time = std::chrono::steady_clock::now();

  const bool warm = mc.quantize && has_warmup(mc.setting);
  const std::size_t warmup_iters = warm ? std::min(config.warmup_sb_iters, config.total_iters) : 0;
  const std::size_t ctx = mc.context_length;

  TrainingReport report;
  report.warmup_iters = warmup_iters;
  report.records.reserve(config.total_iters);

  auto enter_phase = [&](Phase phase) {
    model.set_phase(phase);
    model.set_trainable(trainable_set(mc.setting, phase));
  };
  if (warmup_iters > 0) {
    enter_phase(Phase::Warmup);
  } else {
    if (mc.quantize && traits(mc.setting).clip == ClipMode::LearnThenFix) model.freeze_scale_offset();
    enter_phase(Phase::Main);
  }
  auto optimizer = std::make_unique<AdamW>(trainable_tensors(model), config.adamw);

  if (config.eval_initial) report.initial_eval = perplexity(model, data.eval(), ctx);

  std::mt19937_64 data_rng(config.seed ^ 0xD1B54A32D192ED03ULL);
  Fingerprints before = config.track_changes ? fingerprint_model(model) : Fingerprints{};
  Fingerprints sb_at_freeze;

  const std::size_t last_iter = std::min(config.total_iters, config.stop_after.value_or(config.total_iters));
  for (std::size_t it = 1; it <= last_iter; ++it) {
    if (warmup_iters > 0 && it == warmup_iters + 1) {
      if (traits(mc.setting).clip == ClipMode::LearnThenFix) model.freeze_scale_offset();
      enter_phase(Phase::Main);
      // Fresh moments: the main phase optimizes a different parameter set.
      optimizer = std::make_unique<AdamW>(trainable_tensors(model), config.adamw);
      if (config.track_changes) sb_at_freeze = fingerprint_model(model);
    }

    Batch batch = sample_batch(data.train(), config.batch_size, ctx, data_rng);
    optimizer->zero_grad();
    double loss_value = 0.0;
    try {
      Tensor loss = model.loss(batch.inputs, batch.targets, ctx);
      loss_value = loss.item();
      backward(loss);
    } catch (const NumericError& e) {
      throw DivergenceError(it, e.what());
    }
    if (!std::isfinite(loss_value)) throw DivergenceError(it, "non-finite loss");

    IterationRecord rec;
    rec.iter = it;
    rec.phase = model.phase();
    rec.loss = loss_value;
    for (const auto& slot : optimizer->slots()) {
      if (!slot.param.has_grad()) continue;
      double ss = 0.0;
      for (double g : slot.param.grad()) ss += g * g;
      rec.grad_norms[kind_of_slot(slot.name)] += ss;
    }
    for (auto& [k, v] : rec.grad_norms) v = std::sqrt(v);

    optimizer->step(config.learning_rate);
    for (auto& nl : model.linears()) {
      Tensor& s = nl.layer->param(ParamKind::Scale);
      if (!s.requires_grad()) continue;
      for (double& v : s.mutable_data()) v = std::max(v, kScaleFloor);
    }
    std::set<std::string> active;
    for (const auto& slot : optimizer->slots()) {
      for (double m : slot.m) {
        if (m != 0.0) {
          active.insert(kind_of_slot(slot.name));
          break;
        }
      }
    }
    rec.active.assign(active.begin(), active.end());

    if (config.track_changes) {
      Fingerprints after = fingerprint_model(model);
      for (const auto& [key, h] : after) {
        if (before[key] != h) rec.changed.push_back(key);
      }
      before = std::move(after);
    }
    report.records.push_back(std::move(rec));
  }

  if (config.track_changes && traits(mc.setting).clip == ClipMode::LearnThenFix && mc.quantize) {
    if (sb_at_freeze.empty()) sb_at_freeze = before;  // frozen before the first step
    report.sb_frozen_constant = sb_at_freeze["s"] == before["s"] && sb_at_freeze["b"] == before["b"];
  }

  report.final_eval = perplexity(model, data.eval(), ctx);
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  report.seconds_per_iter = report.elapsed_seconds / static_cast<double>(last_iter);
  return report;
}

const AblationRow& AblationReport::row(AblationSetting setting, int b) const {
  for (const auto& r : rows) {
    if (r.setting == setting && r.bits == b) return r;
  }
  throw std::out_of_range("no ablation row for setting " + std::to_string(setting_index(setting)) +
                          " at " + std::to_string(b) + " bits");
}

std::string AblationReport::table() const {
  std::ostringstream os;
  os << std::left << std::setw(9) << "Setting" << std::setw(7) << "m" << std::setw(17)
     << "Clipping bounds" << std::setw(22) << "Learnable params";
  for (int b : bits) os << std::setw(24) << (std::to_string(b) + " bit loss (ppl)");
  os << '\n';
  for (int s = 1; s <= 6; ++s) {
    const auto setting = setting_from_index(s);
    os << std::left << std::setw(9) << s << std::setw(7) << magnitude_label(setting) << std::setw(17)
       << clip_mode_label(traits(setting).clip) << std::setw(22) << learnable_label(setting);
    for (int b : bits) {
      const auto& r = row(setting, b);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(4) << r.mean_loss << "+-" << std::setprecision(4)
           << r.std_loss << " (" << std::setprecision(2) << r.mean_ppl << ")";
      os << std::setw(24) << cell.str();
    }
    os << '\n';
  }
  return os.str();
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1.0))};
}

}  // namespace

AblationReport run_ablation(const ModelFactory& factory, const Corpus& data,
                            const TrainConfig& base, const std::vector<int>& bits,
                            const std::vector<std::uint64_t>& seeds,
                            const std::function<void(const std::string&)>& progress) {
  if (bits.empty() || seeds.empty()) throw std::invalid_argument("ablation needs bits and seeds");
  AblationReport report;
  report.bits = bits;
  report.seeds = seeds;
  for (int b : bits) {
    for (int s = 1; s <= 6; ++s) {
      AblationRow row;
      row.setting = setting_from_index(s);
      row.bits = b;
      for (auto seed : seeds) {
        TinyLM model = factory(row.setting, b, seed);
        TrainConfig cfg = base;
        cfg.seed = seed;
        cfg.eval_initial = false;
        auto tr = run_training(model, data, cfg);
        row.final_losses.push_back(tr.final_eval.mean_nll);
        row.final_ppls.push_back(tr.final_eval.ppl);
        if (tr.sb_frozen_constant) {
          row.sb_frozen_constant = row.sb_frozen_constant.value_or(true) && *tr.sb_frozen_constant;
        }
        if (progress) {
          std::ostringstream os;
          os << "setting " << s << " bits " << b << " seed " << seed << " eval_nll "
             << tr.final_eval.mean_nll;
          progress(os.str());
        }
      }
      std::tie(row.mean_loss, row.std_loss) = mean_std(row.final_losses);
      std::tie(row.mean_ppl, row.std_ppl) = mean_std(row.final_ppls);
      report.rows.push_back(std::move(row));
    }
  }
  if (std::find(bits.begin(), bits.end(), 3) != bits.end()) {
    const double s5 = report.row(AblationSetting::S5, 3).mean_loss;
    report.s5_le_s1 = s5 <= report.row(AblationSetting::S1, 3).mean_loss;
    report.s5_le_s2 = s5 <= report.row(AblationSetting::S2, 3).mean_loss;
  }
  return report;
}

}  // namespace dlqat
