#include "dlqat/report.hpp"

#include <iomanip>
#include <sstream>

namespace dlqat {

using nlohmann::json;

json header_record(const std::string& command, const json& config) {
  return {{"record", "header"},
          {"format_version", kReportFormatVersion},
          {"command", command},
          {"config", config}};
}

json iteration_record(const IterationRecord& rec) {
  return {{"record", "iter"},
          {"iter", rec.iter},
          {"phase", std::string(phase_label(rec.phase))},
          {"loss", rec.loss},
          {"grad_norms", rec.grad_norms},
          {"changed", rec.changed}};
}

json perplexity_json(const Perplexity& p) {
  return {{"mean_nll", p.mean_nll}, {"ppl", p.ppl}, {"tokens", p.tokens}};
}

json ablation_row_json(const AblationRow& row) {
  const auto t = traits(row.setting);
  json j = {{"record", "row"},
            {"setting", setting_index(row.setting)},
            {"bits", row.bits},
            {"m", std::string(magnitude_label(row.setting))},
            {"clipping_bounds", std::string(clip_mode_label(t.clip))},
            {"learnable", learnable_label(row.setting)},
            {"final_losses", row.final_losses},
            {"final_ppls", row.final_ppls},
            {"mean_loss", row.mean_loss},
            {"std_loss", row.std_loss},
            {"mean_ppl", row.mean_ppl},
            {"std_ppl", row.std_ppl}};
  if (row.sb_frozen_constant) j["sb_frozen_constant"] = *row.sb_frozen_constant;
  return j;
}

json gradcheck_json(const GradcheckReport& report) {
  json entries = json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"name", e.name},
                       {"method", e.method},
                       {"points", e.points},
                       {"max_error", e.max_error},
                       {"tolerance", e.tolerance},
                       {"passed", e.passed}});
  }
  return {{"passed", report.passed()}, {"entries", entries}};
}

json audit_json(const ArchEntry& entry, const QuantSpec& spec, std::size_t rank,
                const ParamAudit& audit) {
  return {{"arch", entry.name},
          {"quant", spec.describe()},
          {"rank", rank},
          {"groups", audit.groups},
          {"count_sb", audit.count_sb},
          {"count_m", audit.count_m},
          {"count_ab", audit.count_ab},
          {"count_m_ab", audit.count_m + audit.count_ab},
          {"total_params", audit.total},
          {"fraction_of_total", audit.fraction_of_total},
          {"below_one_percent", audit.fraction_of_total < 0.01}};
}

std::string footer(const std::string& text) {
  std::ostringstream os;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) os << "# " << line << '\n';
  return os.str();
}

void write_training_report(std::ostream& os, const json& config, const TrainingReport& report) {
  os << header_record("train", config).dump() << '\n';
  for (const auto& rec : report.records) os << iteration_record(rec).dump() << '\n';
  json summary = {{"record", "summary"},
                  {"iters", report.records.size()},
                  {"warmup_iters", report.warmup_iters},
                  {"final_eval", perplexity_json(report.final_eval)},
                  {"elapsed_seconds", report.elapsed_seconds},
                  {"seconds_per_iter", report.seconds_per_iter}};
  if (report.initial_eval) summary["initial_eval"] = perplexity_json(*report.initial_eval);
  if (report.sb_frozen_constant) summary["sb_frozen_constant"] = *report.sb_frozen_constant;
  os << summary.dump() << '\n';

  std::ostringstream human;
  human << std::fixed << std::setprecision(4);
  human << "iterations: " << report.records.size() << " (warm-up " << report.warmup_iters << ")\n";
  if (!report.records.empty()) human << "final train loss: " << report.records.back().loss << '\n';
  if (report.initial_eval) {
    human << "initial eval: nll " << report.initial_eval->mean_nll << " ppl "
          << report.initial_eval->ppl << '\n';
  }
  human << "final eval: nll " << report.final_eval.mean_nll << " ppl " << report.final_eval.ppl
        << '\n';
  human << "seconds per iteration: " << report.seconds_per_iter << '\n';
  os << footer(human.str());
}

void write_ablation_report(std::ostream& os, const json& config, const AblationReport& report) {
  os << header_record("ablation", config).dump() << '\n';
  for (const auto& row : report.rows) os << ablation_row_json(row).dump() << '\n';
  json summary = {{"record", "summary"}, {"bits", report.bits}, {"seeds", report.seeds}};
  if (report.s5_le_s1) summary["s5_le_s1_at_3bit"] = *report.s5_le_s1;
  if (report.s5_le_s2) summary["s5_le_s2_at_3bit"] = *report.s5_le_s2;
  os << summary.dump() << '\n';

  std::string text = report.table();
  if (report.s5_le_s1 && report.s5_le_s2) {
    text += (*report.s5_le_s1 && *report.s5_le_s2)
                ? "3-bit ordering: setting 5 <= settings 1 and 2\n"
                : "3-bit ordering DEVIATES: setting 5 is not <= both settings 1 and 2\n";
  }
  os << footer(text);
}

}  // namespace dlqat
