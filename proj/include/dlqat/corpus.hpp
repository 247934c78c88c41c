#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace dlqat {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raw bytes as token ids, split once into a training prefix and an
/// evaluation suffix.
struct Corpus {
  std::vector<std::int32_t> ids;
  std::size_t split = 0;

  std::span<const std::int32_t> train() const { return std::span(ids).first(split); }
  std::span<const std::int32_t> eval() const { return std::span(ids).subspan(split); }

  friend bool operator==(const Corpus&, const Corpus&) = default;
};

/// Train size is floor(bytes * split_fraction). Throws DataError for an
/// unreadable or empty file, or a split that leaves either side empty.
Corpus load_corpus(const std::filesystem::path& path, double split_fraction);
Corpus corpus_from_bytes(std::span<const std::uint8_t> bytes, double split_fraction);

}  // namespace dlqat
