#include "dlqat/corpus.hpp"

#include <cmath>
#include <fstream>
#include <iterator>

namespace dlqat {

Corpus corpus_from_bytes(std::span<const std::uint8_t> bytes, double split_fraction) {
  if (bytes.empty()) throw DataError("corpus is empty");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw DataError("split fraction must be in (0, 1)");
  }
  Corpus c;
  c.ids.assign(bytes.begin(), bytes.end());
  // Tolerance absorbs representation error, e.g. 10 * 0.8.
  c.split = static_cast<std::size_t>(std::floor(static_cast<double>(bytes.size()) * split_fraction + 1e-9));
  if (c.split == 0 || c.split >= c.ids.size()) {
    throw DataError("split of " + std::to_string(bytes.size()) +
                    " bytes leaves an empty train or eval side");
  }
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, double split_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read corpus " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("error reading corpus " + path.string());
  return corpus_from_bytes(bytes, split_fraction);
}

}  // namespace dlqat
