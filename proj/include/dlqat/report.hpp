#pragma once

#include <ostream>
#include <string>

#include <json.hpp>

#include "dlqat/audit.hpp"
#include "dlqat/gradcheck.hpp"
#include "dlqat/trainer.hpp"

namespace dlqat {

inline constexpr int kReportFormatVersion = 1;

// Reports are JSON lines: a "header" record (format version, command,
// effective config), body records, a "summary" record, then a footer of
// '#'-prefixed human-readable lines.

nlohmann::json header_record(const std::string& command, const nlohmann::json& config);
nlohmann::json iteration_record(const IterationRecord& rec);
nlohmann::json perplexity_json(const Perplexity& p);
nlohmann::json ablation_row_json(const AblationRow& row);
nlohmann::json gradcheck_json(const GradcheckReport& report);
nlohmann::json audit_json(const ArchEntry& entry, const QuantSpec& spec, std::size_t rank,
                          const ParamAudit& audit);

void write_training_report(std::ostream& os, const nlohmann::json& config,
                           const TrainingReport& report);
void write_ablation_report(std::ostream& os, const nlohmann::json& config,
                           const AblationReport& report);

/// Prefixes every line of `text` with "# ".
std::string footer(const std::string& text);

}  // namespace dlqat
