#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dlqat/model.hpp"
#include "dlqat/quant.hpp"

namespace dlqat {

// Pack file layout (all integers little-endian):
//
//   "DLQT" | version u16 | bits u8 | granularity u8 (0 per-channel, 1 group)
//   | group size u32 (0 for per-channel)
//   then per tensor:
//     name length u16 | UTF-8 name | n_dims u8 | dims u32 x n_dims
//     | grid: ceil(numel * bits / 8) bytes
//     | scale, offset, magnitude: binary32 x groups each
//   | CRC-32 (IEEE) of every preceding byte, u32
//
// Grid values v are stored as v + 2^(bits-1), packed LSB-first: bit k of
// element i sits at stream bit i * bits + k, i.e. byte (i*bits+k)/8, bit
// (i*bits+k)%8. Elements are row-major; only the last byte is padded.

inline constexpr char kPackMagic[4] = {'D', 'L', 'Q', 'T'};
inline constexpr std::uint16_t kPackVersion = 1;

enum class PackErrorKind {
  BadMagic,
  BadVersion,
  BadHeader,
  Truncated,
  CrcMismatch,
  NonFinite,
  NameNotFound,
  DimMismatch,
  Io,
};

class PackError : public std::runtime_error {
 public:
  PackError(PackErrorKind kind, const std::string& what) : std::runtime_error(what), kind(kind) {}
  PackErrorKind kind;
};

struct PackedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<std::int32_t> grid;  // signed grid values, row-major
  std::vector<float> scale;
  std::vector<float> offset;
  std::vector<float> magnitude;

  std::size_t rows() const;
  std::size_t cols() const { return dims.back(); }
  std::size_t numel() const;

  friend bool operator==(const PackedTensor&, const PackedTensor&) = default;
};

struct PackFile {
  QuantSpec spec;
  std::vector<PackedTensor> tensors;

  const PackedTensor& find(const std::string& name) const;
  friend bool operator==(const PackFile&, const PackFile&) = default;
};

std::size_t packed_grid_bytes(std::size_t numel, int bits);
std::vector<std::uint8_t> pack_bits(std::span<const std::int32_t> values, int bits);
std::vector<std::int32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count,
                                      int bits);

std::vector<std::uint8_t> serialize_pack(const PackFile& pack);
/// Validates magic, version, header fields, structure, then CRC; each
/// failure raises PackError with its own kind.
PackFile deserialize_pack(std::span<const std::uint8_t> bytes);

/// Grid and metadata of one finalized layer.
PackedTensor pack_linear(const std::string& name, const DLQATLinear& layer);

/// Finalizes the model for export (see DLQATLinear::finalize_for_export)
/// and collects every projection.
PackFile pack_contents(TinyLM& model);
std::vector<std::uint8_t> pack_model(TinyLM& model);
PackFile unpack_model(std::span<const std::uint8_t> bytes);

/// magnitude * (scale * grid + offset), the same arithmetic as the
/// in-memory quantizer.
Tensor dequantize_packed(const PackedTensor& t, const QuantSpec& spec);
/// W_q . X for the named tensor.
Tensor packed_linear_forward(const PackFile& pack, const std::string& name, const Tensor& x);
/// Points every projection of `model` at its reconstructed packed weight.
void load_packed_weights(TinyLM& model, const PackFile& pack);

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

}  // namespace dlqat
