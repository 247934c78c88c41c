#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlqat/quant.hpp"

namespace dlqat {

struct LinearShape {
  std::string name;
  std::size_t c_out = 0;
  std::size_t c_in = 0;
};

/// Shape-only description of a LLaMA-family architecture. No weights.
struct ArchEntry {
  std::string name;
  std::size_t n_layers = 0;
  std::size_t d_model = 0;
  std::size_t ffn_hidden = 0;
  std::size_t vocab_size = 0;

  /// q, k, v, o, gate, up, down for every layer.
  std::vector<LinearShape> linears() const;
  /// Embedding + output head + projections + RMSNorm gains.
  std::uint64_t total_params() const;
};

class UnknownArchError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

const std::vector<ArchEntry>& shape_catalog();
const ArchEntry& catalog_entry(const std::string& name);

struct ParamAudit {
  std::uint64_t groups = 0;
  std::uint64_t count_sb = 0;  // 2 per group
  std::uint64_t count_m = 0;   // 1 per group
  std::uint64_t count_ab = 0;  // r * (C_in + C_out) per projection
  std::uint64_t total = 0;
  /// (count_m + count_ab) / total: what stays trainable after s, b freeze.
  double fraction_of_total = 0.0;
};

ParamAudit audit_params(const ArchEntry& entry, const QuantSpec& spec, std::size_t rank);
ParamAudit audit_linears(std::span<const LinearShape> linears, const QuantSpec& spec,
                         std::size_t rank, std::uint64_t total_params);

}  // namespace dlqat
