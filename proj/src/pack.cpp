#include "dlqat/pack.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dlqat/ops.hpp"

namespace dlqat {

static_assert(std::endian::native == std::endian::little, "pack I/O assumes a little-endian host");

std::size_t PackedTensor::rows() const {
  std::size_t r = 1;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) r *= dims[i];
  return r;
}

std::size_t PackedTensor::numel() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

const PackedTensor& PackFile::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw PackError(PackErrorKind::NameNotFound, "pack has no tensor named " + name);
}

std::size_t packed_grid_bytes(std::size_t numel, int bits) {
  return (numel * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_bits(std::span<const std::int32_t> values, int bits) {
  const std::int32_t bias = 1 << (bits - 1);
  std::vector<std::uint8_t> out(packed_grid_bytes(values.size(), bits), 0);
  std::size_t pos = 0;
  for (auto v : values) {
    const auto u = static_cast<std::uint32_t>(v + bias);
    if (u >= (1u << bits)) throw std::invalid_argument("grid value outside the bit-width");
    for (int k = 0; k < bits; ++k, ++pos) {
      if ((u >> k) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
    }
  }
  return out;
}

std::vector<std::int32_t> unpack_bits(std::span<const std::uint8_t> bytes, std::size_t count,
                                      int bits) {
  if (bytes.size() < packed_grid_bytes(count, bits)) {
    throw PackError(PackErrorKind::Truncated, "grid shorter than its element count");
  }
  const std::int32_t bias = 1 << (bits - 1);
  std::vector<std::int32_t> out(count);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < bits; ++k, ++pos) u |= static_cast<std::uint32_t>((bytes[pos / 8] >> (pos % 8)) & 1u) << k;
    out[i] = static_cast<std::int32_t>(u) - bias;
  }
  return out;
}

namespace {

std::size_t group_count(const PackedTensor& t, const QuantSpec& spec) {
  return t.rows() * spec.groups_per_row(t.cols());
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    bytes.insert(bytes.end(), buf, buf + sizeof(T));
  }
  void put_bytes(std::span<const std::uint8_t> b) { bytes.insert(bytes.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw PackError(PackErrorKind::Truncated, "pack payload is truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> serialize_pack(const PackFile& pack) {
  pack.spec.validate();
  Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kPackMagic), 4});
  w.put<std::uint16_t>(kPackVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(pack.spec.bits));
  w.put<std::uint8_t>(pack.spec.is_per_channel() ? 0 : 1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(pack.spec.group_size.value_or(0)));
  for (const auto& t : pack.tensors) {
    if (t.name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long");
    if (t.dims.empty() || t.dims.size() > 0xFF) throw std::invalid_argument("bad tensor rank");
    if (t.grid.size() != t.numel()) throw std::invalid_argument("grid size does not match dims");
    const auto groups = group_count(t, pack.spec);
    if (t.scale.size() != groups || t.offset.size() != groups || t.magnitude.size() != groups) {
      throw std::invalid_argument("metadata size does not match group count for " + t.name);
    }
    w.put<std::uint16_t>(static_cast<std::uint16_t>(t.name.size()));
    w.put_bytes({reinterpret_cast<const std::uint8_t*>(t.name.data()), t.name.size()});
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.put<std::uint32_t>(d);
    w.put_bytes(pack_bits(t.grid, pack.spec.bits));
    for (const auto* arr : {&t.scale, &t.offset, &t.magnitude}) {
      for (float f : *arr) {
        if (!std::isfinite(f)) throw PackError(PackErrorKind::NonFinite, "non-finite metadata in " + t.name);
        w.put<float>(f);
      }
    }
  }
  w.put<std::uint32_t>(crc32_of(w.bytes));
  return std::move(w.bytes);
}

PackFile deserialize_pack(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPackMagic, 4) != 0) {
    throw PackError(PackErrorKind::BadMagic, "not a pack file (bad magic)");
  }
  constexpr std::size_t kHeader = 4 + 2 + 1 + 1 + 4;
  if (bytes.size() < kHeader + 4) throw PackError(PackErrorKind::Truncated, "pack header is truncated");
  const auto body = bytes.first(bytes.size() - 4);
  Reader r(body);
  r.take(4);
  const auto version = r.get<std::uint16_t>();
  if (version != kPackVersion) {
    throw PackError(PackErrorKind::BadVersion, "unsupported pack version " + std::to_string(version));
  }
  const int bits = r.get<std::uint8_t>();
  const auto gran = r.get<std::uint8_t>();
  const auto group = r.get<std::uint32_t>();
  if (bits < 2 || bits > 8 || gran > 1 || (gran == 1 && group == 0) || (gran == 0 && group != 0)) {
    throw PackError(PackErrorKind::BadHeader, "invalid quantizer fields in pack header");
  }
  PackFile pack;
  pack.spec = gran == 0 ? QuantSpec::per_channel(bits) : QuantSpec::grouped(bits, group);

  while (r.pos() < body.size()) {
    PackedTensor t;
    const auto name_len = r.get<std::uint16_t>();
    auto name = r.take(name_len);
    t.name.assign(name.begin(), name.end());
    const auto n_dims = r.get<std::uint8_t>();
    if (n_dims == 0) throw PackError(PackErrorKind::BadHeader, "tensor " + t.name + " has no dims");
    for (std::size_t i = 0; i < n_dims; ++i) {
      t.dims.push_back(r.get<std::uint32_t>());
      if (t.dims.back() == 0) throw PackError(PackErrorKind::BadHeader, "zero dimension in " + t.name);
    }
    if (pack.spec.group_size && t.cols() % *pack.spec.group_size != 0) {
      throw PackError(PackErrorKind::BadHeader, "group size does not divide " + t.name);
    }
    t.grid = unpack_bits(r.take(packed_grid_bytes(t.numel(), bits)), t.numel(), bits);
    const auto groups = group_count(t, pack.spec);
    for (auto* arr : {&t.scale, &t.offset, &t.magnitude}) {
      arr->resize(groups);
      for (auto& f : *arr) f = r.get<float>();
    }
    pack.tensors.push_back(std::move(t));
  }

  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 4);
  if (stored != crc32_of(body)) throw PackError(PackErrorKind::CrcMismatch, "pack CRC mismatch");
  for (const auto& t : pack.tensors) {
    for (const auto* arr : {&t.scale, &t.offset, &t.magnitude}) {
      for (float f : *arr) {
        if (!std::isfinite(f)) throw PackError(PackErrorKind::NonFinite, "non-finite metadata in " + t.name);
      }
    }
    for (float s : t.scale) {
      if (!(s > 0.0f)) throw PackError(PackErrorKind::BadHeader, "nonpositive scale in " + t.name);
    }
  }
  return pack;
}

PackedTensor pack_linear(const std::string& name, const DLQATLinear& layer) {
  if (!layer.quantized()) throw std::invalid_argument("cannot pack unquantized layer " + name);
  if (!layer.finalized()) throw std::logic_error("layer " + name + " must be finalized before packing");
  NoGradGuard no_grad;
  const Tensor w = layer.effective_weight();
  const auto& qp = layer.qparams();
  PackedTensor t;
  t.name = name;
  t.dims = {static_cast<std::uint32_t>(w.rows()), static_cast<std::uint32_t>(w.cols())};
  t.grid = quantize_ints(w, qp.scale, qp.offset, layer.spec());
  const bool has_m = traits(layer.setting()).magnitude;
  for (std::size_t g = 0; g < qp.scale.numel(); ++g) {
    t.scale.push_back(static_cast<float>(qp.scale.data()[g]));
    t.offset.push_back(static_cast<float>(qp.offset.data()[g]));
    t.magnitude.push_back(has_m ? static_cast<float>(qp.magnitude.data()[g]) : 1.0f);
  }
  return t;
}

PackFile pack_contents(TinyLM& model) {
  model.finalize_for_export();
  PackFile pack;
  pack.spec = model.config().spec;
  for (auto& nl : model.linears()) pack.tensors.push_back(pack_linear(nl.name, *nl.layer));
  return pack;
}

std::vector<std::uint8_t> pack_model(TinyLM& model) { return serialize_pack(pack_contents(model)); }

PackFile unpack_model(std::span<const std::uint8_t> bytes) { return deserialize_pack(bytes); }

Tensor dequantize_packed(const PackedTensor& t, const QuantSpec& spec) {
  const Shape shape{t.rows(), t.cols()};
  const Shape pshape{t.rows(), spec.groups_per_row(t.cols())};
  auto widen = [&](const std::vector<float>& v) {
    return Tensor(pshape, std::vector<double>(v.begin(), v.end()));
  };
  return dequantize(t.grid, shape, widen(t.scale), widen(t.offset), widen(t.magnitude), spec);
}

Tensor packed_linear_forward(const PackFile& pack, const std::string& name, const Tensor& x) {
  const auto& t = pack.find(name);
  if (x.rows() != t.cols()) {
    throw PackError(PackErrorKind::DimMismatch, "input " + shape_str(x.shape()) + " does not match " +
                                                    name + " with " + std::to_string(t.cols()) +
                                                    " input channels");
  }
  return matmul(dequantize_packed(t, pack.spec), x);
}

void load_packed_weights(TinyLM& model, const PackFile& pack) {
  if (!(pack.spec == model.config().spec)) {
    throw PackError(PackErrorKind::DimMismatch, "pack quantizer " + pack.spec.describe() +
                                                    " does not match model " +
                                                    model.config().spec.describe());
  }
  for (auto& nl : model.linears()) {
    const auto& t = pack.find(nl.name);
    if (t.rows() != nl.layer->out_features() || t.cols() != nl.layer->in_features()) {
      throw PackError(PackErrorKind::DimMismatch, "packed " + nl.name + " has the wrong shape");
    }
    model.set_weight_override(nl.name, dequantize_packed(t, pack.spec));
  }
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PackError(PackErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PackError(PackErrorKind::Io, "failed writing " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PackError(PackErrorKind::Io, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace dlqat
