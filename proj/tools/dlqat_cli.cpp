// dlqat: train, ablate, audit, gradient-check, pack and evaluate.
//
// Exit codes: 0 success, 2 config/validation error, 3 I/O or data error,
// 4 training divergence, 5 check failure.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include "dlqat/audit.hpp"
#include "dlqat/config.hpp"
#include "dlqat/gradcheck.hpp"
#include "dlqat/pack.hpp"
#include "dlqat/report.hpp"
#include "dlqat/trainer.hpp"

namespace {

using namespace dlqat;
using nlohmann::json;

enum ExitCode : int {
  kOk = 0,
  kValidation = 2,
  kIo = 3,
  kDivergence = 4,
  kCheckFailed = 5,
};

struct CommonOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool json = false;
};

void add_common(CLI::App* cmd, CommonOptions& opts, bool with_config = true) {
  if (with_config) cmd->add_option("--config", opts.config_path, "INI run configuration");
  cmd->add_option("--seed", opts.seed, "Overrides [train] seed");
  cmd->add_option("--out", opts.out, "Output path (report or pack file)");
  cmd->add_flag("--json", opts.json, "Machine-readable output on stdout");
}

RunConfig resolve_config(const CommonOptions& opts) {
  RunConfig cfg = opts.config_path.empty() ? RunConfig{} : load_run_config(opts.config_path);
  if (opts.seed) cfg.set_seed(*opts.seed);
  cfg.validate();
  return cfg;
}

Corpus load_data(const RunConfig& cfg) {
  if (cfg.corpus_path.empty()) throw DataError("no corpus configured ([data] corpus)");
  return load_corpus(cfg.corpus_path, cfg.split);
}

std::ofstream open_report(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PackError(PackErrorKind::Io, "cannot write report '" + path + "'");
  return os;
}

int cmd_train(const CommonOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (!opts.out.empty()) cfg.report_path = opts.out;
  Corpus data = load_data(cfg);
  TinyLM model(cfg.model);
  TrainingReport report = run_training(model, data, cfg.train);
  auto os = open_report(cfg.report_path);
  write_training_report(os, cfg.to_json(), report);
  if (opts.json) {
    json j = {{"report", cfg.report_path}, {"final_eval", perplexity_json(report.final_eval)}};
    if (report.initial_eval) j["initial_eval"] = perplexity_json(*report.initial_eval);
    std::cout << j.dump() << '\n';
  } else {
    std::cout << std::fixed << std::setprecision(4);
    if (report.initial_eval) std::cout << "initial eval ppl " << report.initial_eval->ppl << '\n';
    std::cout << "final eval ppl " << report.final_eval.ppl << '\n'
              << "report written to " << cfg.report_path << '\n';
  }
  return kOk;
}

int cmd_ablation(const CommonOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (!opts.out.empty()) cfg.report_path = opts.out;
  Corpus data = load_data(cfg);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < cfg.ablation_seeds; ++i) seeds.push_back(cfg.train.seed + i);
  const TinyLMConfig base_model = cfg.model;
  ModelFactory factory = [base_model](AblationSetting setting, int bits, std::uint64_t seed) {
    TinyLMConfig m = base_model;
    m.setting = setting;
    m.spec.bits = bits;
    m.seed = seed;
    return TinyLM(m);
  };
  auto progress = [](const std::string& line) { std::cerr << line << '\n'; };
  AblationReport report = run_ablation(factory, data, cfg.train, cfg.ablation_bits, seeds, progress);
  auto os = open_report(cfg.report_path);
  write_ablation_report(os, cfg.to_json(), report);
  if (opts.json) {
    json rows = json::array();
    for (const auto& r : report.rows) rows.push_back(ablation_row_json(r));
    std::cout << json{{"report", cfg.report_path}, {"rows", rows}}.dump() << '\n';
  } else {
    std::cout << report.table();
    if (report.s5_le_s1 && report.s5_le_s2 && !(*report.s5_le_s1 && *report.s5_le_s2)) {
      std::cout << "note: 3-bit ordering deviates (setting 5 not <= settings 1 and 2)\n";
    }
  }
  return kOk;
}

int cmd_gradcheck(const CommonOptions& opts, std::size_t points) {
  const GradcheckReport report = run_gradcheck(opts.seed.value_or(0), points);
  if (opts.json) {
    std::cout << gradcheck_json(report).dump() << '\n';
  } else {
    for (const auto& e : report.entries) {
      std::cout << std::left << std::setw(28) << e.name << std::setw(19) << e.method
                << "max_err " << std::scientific << std::setprecision(3) << e.max_error
                << "  tol " << e.tolerance << "  " << (e.passed ? "ok" : "FAIL") << '\n';
    }
    std::cout << (report.passed() ? "all gradient checks passed" : "gradient checks FAILED") << '\n';
  }
  return report.passed() ? kOk : kCheckFailed;
}

struct AuditOptions {
  std::string arch = "llama-7b";
  int bits = 4;
  std::string granularity = "per-channel";
  std::size_t group_size = 128;
  std::size_t rank = 16;
  bool list = false;
};

int cmd_audit(const CommonOptions& opts, const AuditOptions& a) {
  if (a.list) {
    json cat = json::array();
    for (const auto& e : shape_catalog()) {
      cat.push_back({{"name", e.name},
                     {"n_layers", e.n_layers},
                     {"d_model", e.d_model},
                     {"ffn_hidden", e.ffn_hidden},
                     {"vocab_size", e.vocab_size},
                     {"total_params", e.total_params()}});
    }
    std::cout << cat.dump(opts.json ? -1 : 2) << '\n';
    return kOk;
  }
  QuantSpec spec;
  if (a.granularity == "per-channel") {
    spec = QuantSpec::per_channel(a.bits);
  } else if (a.granularity == "group") {
    spec = QuantSpec::grouped(a.bits, a.group_size);
  } else {
    throw std::invalid_argument("--granularity must be 'per-channel' or 'group'");
  }
  const ArchEntry& entry = catalog_entry(a.arch);
  const ParamAudit audit = audit_params(entry, spec, a.rank);
  if (opts.json) {
    std::cout << audit_json(entry, spec, a.rank, audit).dump() << '\n';
  } else {
    auto millions = [](std::uint64_t n) { return static_cast<double>(n) / 1e6; };
    std::cout << std::fixed << std::setprecision(2) << entry.name << "  " << spec.describe()
              << "  rank " << a.rank << '\n'
              << "  s,b params (M):      " << millions(audit.count_sb) << '\n'
              << "  m,A,B params (M):    " << millions(audit.count_m + audit.count_ab) << '\n'
              << "  total params (M):    " << millions(audit.total) << '\n'
              << "  trainable fraction:  " << std::setprecision(4) << 100.0 * audit.fraction_of_total
              << "%" << (audit.fraction_of_total < 0.01 ? " (< 1%)" : "") << '\n';
  }
  return kOk;
}

int cmd_pack(const CommonOptions& opts) {
  RunConfig cfg = resolve_config(opts);
  if (!opts.out.empty()) cfg.pack_path = opts.out;
  if (!cfg.model.quantize) throw ConfigError("pack requires [model] quantize = true");
  Corpus data = load_data(cfg);
  TinyLM model(cfg.model);
  TrainConfig train = cfg.train;
  train.eval_initial = false;
  run_training(model, data, train);

  const auto bytes = pack_model(model);
  write_file(cfg.pack_path, bytes);
  const Perplexity in_memory = perplexity(model, data.eval(), cfg.model.context_length);

  TinyLM rebuilt(cfg.model);
  load_packed_weights(rebuilt, unpack_model(read_file(cfg.pack_path)));
  const Perplexity packed = perplexity(rebuilt, data.eval(), cfg.model.context_length);
  const bool identical = in_memory.mean_nll == packed.mean_nll;

  if (opts.json) {
    std::cout << json{{"pack", cfg.pack_path},
                      {"bytes", bytes.size()},
                      {"in_memory", perplexity_json(in_memory)},
                      {"packed", perplexity_json(packed)},
                      {"identical", identical}}
                     .dump()
              << '\n';
  } else {
    std::cout << std::setprecision(17) << "wrote " << bytes.size() << " bytes to " << cfg.pack_path
              << '\n'
              << "in-memory eval ppl " << in_memory.ppl << '\n'
              << "packed eval ppl    " << packed.ppl << '\n';
  }
  return identical ? kOk : kCheckFailed;
}

int cmd_eval(const CommonOptions& opts, const std::string& pack_path) {
  RunConfig cfg = resolve_config(opts);
  Corpus data = load_data(cfg);
  TinyLM model(cfg.model);
  if (!pack_path.empty()) load_packed_weights(model, unpack_model(read_file(pack_path)));
  const Perplexity p = perplexity(model, data.eval(), cfg.model.context_length);
  if (opts.json) {
    json j = perplexity_json(p);
    j["source"] = pack_path.empty() ? "config" : pack_path;
    std::cout << j.dump() << '\n';
  } else {
    std::cout << std::setprecision(17) << "eval nll " << p.mean_nll << " ppl " << p.ppl << " over "
              << p.tokens << " tokens\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-decomposed low-rank quantization-aware training"};
  app.require_subcommand(1);

  CommonOptions train_opts, ablation_opts, grad_opts, audit_common, pack_opts, eval_opts;
  AuditOptions audit_opts;
  std::size_t grad_points = 100;
  std::string eval_pack;

  auto* train = app.add_subcommand("train", "Run the two-phase training schedule");
  add_common(train, train_opts);
  auto* ablation = app.add_subcommand("ablation", "Train all six settings per bit-width and seed");
  add_common(ablation, ablation_opts);
  auto* grad = app.add_subcommand("gradcheck", "Check every gradient against its oracle");
  add_common(grad, grad_opts, false);
  grad->add_option("--points", grad_points, "Random points per check")->check(CLI::PositiveNumber);
  auto* audit = app.add_subcommand("audit", "Count trainable parameters of a catalog architecture");
  add_common(audit, audit_common, false);
  audit->add_option("--arch", audit_opts.arch, "Catalog entry name");
  audit->add_option("--bits", audit_opts.bits, "Weight bit-width")->check(CLI::Range(2, 8));
  audit->add_option("--granularity", audit_opts.granularity, "per-channel or group");
  audit->add_option("--group-size", audit_opts.group_size, "Group size for group granularity");
  audit->add_option("--rank", audit_opts.rank, "LoRA rank");
  audit->add_flag("--list", audit_opts.list, "Dump the shape catalog");
  auto* pack = app.add_subcommand("pack", "Train per config, then write a pack file");
  add_common(pack, pack_opts);
  auto* eval = app.add_subcommand("eval", "Evaluate perplexity of a config model or a pack file");
  add_common(eval, eval_opts);
  eval->add_option("--pack", eval_pack, "Pack file whose weights replace the projections");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kValidation;
  }

  try {
    if (*train) return cmd_train(train_opts);
    if (*ablation) return cmd_ablation(ablation_opts);
    if (*grad) return cmd_gradcheck(grad_opts, grad_points);
    if (*audit) return cmd_audit(audit_common, audit_opts);
    if (*pack) return cmd_pack(pack_opts);
    if (*eval) return cmd_eval(eval_opts, eval_pack);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kValidation;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << '\n';
    return kDivergence;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kIo;
  } catch (const PackError& e) {
    std::cerr << "pack error: " << e.what() << '\n';
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kValidation;
  } catch (const std::out_of_range& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIo;
  }
  return kOk;
}
