#include <gtest/gtest.h>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "dlqat/ops.hpp"
#include "dlqat/pack.hpp"

namespace dlqat {
namespace {

TinyLMConfig small(int bits, std::optional<std::size_t> group, AblationSetting setting = AblationSetting::S5) {
  TinyLMConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_hidden = 32;
  c.context_length = 8;
  c.rank = 2;
  c.setting = setting;
  c.spec = group ? QuantSpec::grouped(bits, *group) : QuantSpec::per_channel(bits);
  return c;
}

// Move every adapter off its initial point so packing sees a nontrivial W_eff.
void perturb(TinyLM& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.05);
  for (auto& nl : model.linears()) {
    for (double& v : nl.layer->param(ParamKind::LoraB).mutable_data()) v = n(rng);
    if (traits(nl.layer->setting()).magnitude) {
      for (double& v : nl.layer->param(ParamKind::Magnitude).mutable_data()) v += n(rng);
    }
  }
}

void refresh_crc(std::vector<std::uint8_t>& bytes) {
  const std::size_t body = bytes.size() - 4;
  const auto crc = static_cast<std::uint32_t>(crc32(0L, bytes.data(), static_cast<uInt>(body)));
  for (int i = 0; i < 4; ++i) bytes[body + i] = static_cast<std::uint8_t>(crc >> (8 * i));
}

PackErrorKind error_kind(const std::vector<std::uint8_t>& bytes) {
  try {
    deserialize_pack(bytes);
  } catch (const PackError& e) {
    return e.kind;
  }
  ADD_FAILURE() << "no PackError raised";
  return PackErrorKind::Io;
}

PackFile one_record(int bits, std::size_t rows, std::size_t cols) {
  PackFile p;
  p.spec = QuantSpec::per_channel(bits);
  PackedTensor t;
  t.name = "w";
  t.dims = {static_cast<std::uint32_t>(rows), static_cast<std::uint32_t>(cols)};
  const int qn = -(1 << (bits - 1)), qp = (1 << (bits - 1)) - 1;
  for (std::size_t i = 0; i < rows * cols; ++i) t.grid.push_back(qn + static_cast<int>(i) % (qp - qn + 1));
  t.scale.assign(rows, 0.25f);
  t.offset.assign(rows, -0.5f);
  t.magnitude.assign(rows, 1.0f);
  p.tensors.push_back(t);
  return p;
}

TEST(BitPacking, FourBitRowUsesFourBytes) {
  const std::vector<std::int32_t> v{-8, -7, 0, 7, 1, -1, 3, -4};
  const auto bytes = pack_bits(v, 4);
  ASSERT_EQ(bytes.size(), 4u);
  // stored nibble = v + 8, low nibble first
  EXPECT_EQ(bytes[0], 0x10);
  EXPECT_EQ(bytes[1], 0xF8);
  EXPECT_EQ(bytes[2], 0x79);
  EXPECT_EQ(bytes[3], 0x4B);
  EXPECT_EQ(unpack_bits(bytes, 8, 4), v);
}

TEST(BitPacking, ThreeBitStreamMatchesBitOracle) {
  const std::vector<std::int32_t> v{-4, 3, 0, -1, 2, 1, -3, -2};
  const auto bytes = pack_bits(v, 3);
  ASSERT_EQ(bytes.size(), 3u);
  std::vector<std::uint8_t> oracle(3, 0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const unsigned u = static_cast<unsigned>(v[i] + 4);
    for (int k = 0; k < 3; ++k) {
      const std::size_t bit = i * 3 + k;
      if ((u >> k) & 1u) oracle[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
    }
  }
  EXPECT_EQ(bytes, oracle);
  EXPECT_EQ(unpack_bits(bytes, 8, 3), v);
}

TEST(BitPacking, RoundTripAllWidthsAndLengths) {
  std::mt19937_64 rng(1);
  for (int bits = 2; bits <= 8; ++bits) {
    for (std::size_t n : {1u, 7u, 8u, 9u, 101u}) {
      std::vector<std::int32_t> v(n);
      for (auto& x : v) x = static_cast<std::int32_t>(rng() % (1u << bits)) - (1 << (bits - 1));
      const auto bytes = pack_bits(v, bits);
      EXPECT_EQ(bytes.size(), packed_grid_bytes(n, bits));
      EXPECT_EQ(unpack_bits(bytes, n, bits), v);
    }
  }
  EXPECT_THROW(pack_bits(std::vector<std::int32_t>{8}, 4), std::invalid_argument);
}

TEST(PackFormat, HeaderAndSingleRecordLayout) {
  const auto bytes = serialize_pack(one_record(4, 1, 8));
  ASSERT_GE(bytes.size(), 12u);
  EXPECT_EQ(std::memcmp(bytes.data(), "DLQT", 4), 0);
  EXPECT_EQ(bytes[4] | (bytes[5] << 8), 1);
  EXPECT_EQ(bytes[6], 4);
  EXPECT_EQ(bytes[7], 0);
  // header 12 | name 2+1 | ndims 1 | dims 8 | grid 4 | s,b,m 12 | crc 4
  EXPECT_EQ(bytes.size(), 12u + 3 + 1 + 8 + 4 + 12 + 4);
  EXPECT_EQ(serialize_pack(one_record(4, 1, 8)), bytes);
}

TEST(PackFormat, ErrorKinds) {
  const auto good = serialize_pack(one_record(3, 2, 8));
  EXPECT_EQ(deserialize_pack(good), one_record(3, 2, 8));

  auto crc = good;
  crc[25] ^= 0x01;  // a grid byte
  EXPECT_EQ(error_kind(crc), PackErrorKind::CrcMismatch);

  auto magic = good;
  magic[0] = 'X';
  EXPECT_EQ(error_kind(magic), PackErrorKind::BadMagic);

  auto version = good;
  version[4] = 2;
  refresh_crc(version);
  EXPECT_EQ(error_kind(version), PackErrorKind::BadVersion);

  std::vector<std::uint8_t> truncated(good.begin(), good.end() - 9);
  EXPECT_EQ(error_kind(truncated), PackErrorKind::Truncated);

  auto nan = good;
  const float q = std::nanf("");
  // first scale value sits right after the 6-byte grid of the record
  const std::size_t scale_at = 12 + 3 + 1 + 8 + packed_grid_bytes(16, 3);
  std::memcpy(nan.data() + scale_at, &q, 4);
  refresh_crc(nan);
  EXPECT_EQ(error_kind(nan), PackErrorKind::NonFinite);

  PackFile bad = one_record(4, 1, 8);
  bad.tensors[0].scale[0] = INFINITY;
  EXPECT_THROW(serialize_pack(bad), PackError);

  const PackFile p = one_record(4, 2, 8);
  try {
    p.find("missing");
    FAIL();
  } catch (const PackError& e) {
    EXPECT_EQ(e.kind, PackErrorKind::NameNotFound);
  }
  try {
    packed_linear_forward(p, "w", Tensor::zeros({7, 2}));
    FAIL();
  } catch (const PackError& e) {
    EXPECT_EQ(e.kind, PackErrorKind::DimMismatch);
  }
  try {
    read_file("/nonexistent/dir/model.dlqt");
    FAIL();
  } catch (const PackError& e) {
    EXPECT_EQ(e.kind, PackErrorKind::Io);
  }
}

TEST(PackModel, RoundTripEveryWidthAndGranularity) {
  for (int bits = 2; bits <= 8; ++bits) {
    for (std::optional<std::size_t> g : {std::optional<std::size_t>{}, std::optional<std::size_t>{8}}) {
      TinyLM model(small(bits, g));
      perturb(model, static_cast<std::uint64_t>(bits));
      const PackFile contents = pack_contents(model);
      const auto bytes = serialize_pack(contents);
      EXPECT_EQ(deserialize_pack(bytes), contents) << bits;
      EXPECT_EQ(pack_model(model), bytes) << "packing is not deterministic";
    }
  }
}

TEST(PackModel, DequantizedGridEqualsFakeQuantizedWeight) {
  for (auto setting : {AblationSetting::S1, AblationSetting::S5, AblationSetting::S6}) {
    TinyLM model(small(4, 8, setting));
    perturb(model, 3);
    const PackFile pack = pack_contents(model);
    for (auto& nl : model.linears()) {
      NoGradGuard ng;
      const auto& qp = nl.layer->qparams();
      const Tensor ref = fake_quantize(nl.layer->effective_weight(), qp.scale, qp.offset,
                                       traits(setting).magnitude ? qp.magnitude : Tensor(), nl.layer->spec());
      const Tensor got = dequantize_packed(pack.find(nl.name), pack.spec);
      ASSERT_EQ(got.shape(), ref.shape());
      for (std::size_t i = 0; i < got.numel(); ++i) ASSERT_EQ(got.at(i), ref.at(i)) << nl.name << " " << i;
    }
  }
}

TEST(PackModel, PackedForwardReproducesModelExactly) {
  TinyLM model(small(3, 8));
  perturb(model, 5);
  const auto bytes = pack_model(model);
  std::vector<std::int32_t> tokens(32);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int32_t>((i * 53 + 7) % 256);
  const Tensor ref = model.forward(tokens, 8);

  TinyLM fresh(small(3, 8));
  load_packed_weights(fresh, unpack_model(bytes));
  const Tensor got = fresh.forward(tokens, 8);
  for (std::size_t i = 0; i < ref.numel(); ++i) ASSERT_EQ(got.at(i), ref.at(i));

  TinyLM other(small(4, 8));
  EXPECT_THROW(load_packed_weights(other, unpack_model(bytes)), PackError);
}

TEST(PackModel, FileSizeAccounting) {
  TinyLM model(small(3, 8));
  const auto bytes = pack_model(model);
  std::size_t expected = 12 + 4;
  for (auto& nl : model.linears()) {
    const std::size_t rows = nl.layer->out_features(), cols = nl.layer->in_features();
    const std::size_t groups = rows * cols / 8;
    expected += 2 + nl.name.size() + 1 + 8 + packed_grid_bytes(rows * cols, 3) + 3 * 4 * groups;
  }
  EXPECT_EQ(bytes.size(), expected);

  const auto path = std::filesystem::temp_directory_path() / "dlqat_test_pack.dlqt";
  write_file(path, bytes);
  EXPECT_EQ(read_file(path), bytes);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace dlqat
