#include "dlqat/audit.hpp"

namespace dlqat {

std::vector<LinearShape> ArchEntry::linears() const {
  std::vector<LinearShape> out;
  out.reserve(n_layers * 7);
  for (std::size_t l = 0; l < n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "q", d_model, d_model});
    out.push_back({p + "k", d_model, d_model});
    out.push_back({p + "v", d_model, d_model});
    out.push_back({p + "o", d_model, d_model});
    out.push_back({p + "gate", ffn_hidden, d_model});
    out.push_back({p + "up", ffn_hidden, d_model});
    out.push_back({p + "down", d_model, ffn_hidden});
  }
  return out;
}

std::uint64_t ArchEntry::total_params() const {
  const std::uint64_t d = d_model, f = ffn_hidden, v = vocab_size;
  const std::uint64_t per_layer = 4 * d * d + 3 * d * f + 2 * d;
  return 2 * v * d + n_layers * per_layer + d;
}

const std::vector<ArchEntry>& shape_catalog() {
  static const std::vector<ArchEntry> catalog = {
      {"llama-7b", 32, 4096, 11008, 32000},
      {"llama-13b", 40, 5120, 13824, 32000},
      {"llama2-7b", 32, 4096, 11008, 32000},
      {"llama2-13b", 40, 5120, 13824, 32000},
      {"tiny", 2, 64, 176, 256},
  };
  return catalog;
}

const ArchEntry& catalog_entry(const std::string& name) {
  for (const auto& e : shape_catalog()) {
    if (e.name == name) return e;
  }
  throw UnknownArchError("unknown architecture '" + name + "'");
}

ParamAudit audit_linears(std::span<const LinearShape> linears, const QuantSpec& spec,
                         std::size_t rank, std::uint64_t total_params) {
  ParamAudit a;
  for (const auto& l : linears) {
    const auto view = GroupView::of(l.c_out, l.c_in, spec);
    a.groups += view.group_count();
    a.count_ab += static_cast<std::uint64_t>(rank) * (l.c_in + l.c_out);
  }
  a.count_sb = 2 * a.groups;
  a.count_m = a.groups;
  a.total = total_params;
  a.fraction_of_total =
      total_params ? static_cast<double>(a.count_m + a.count_ab) / static_cast<double>(total_params) : 0.0;
  return a;
}

ParamAudit audit_params(const ArchEntry& entry, const QuantSpec& spec, std::size_t rank) {
  const auto linears = entry.linears();
  return audit_linears(linears, spec, rank, entry.total_params());
}

}  // namespace dlqat
