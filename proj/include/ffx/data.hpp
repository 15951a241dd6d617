#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string_view>
#include <vector>

#include "ffx/ops.hpp"

namespace ffx {

enum class SplitName { train, valid, test };
std::string_view to_string(SplitName s);
SplitName parse_split(std::string_view s);  // ConfigError on unknown names

struct SplitRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

// Byte-level corpus: every byte is one token id in [0, 256).
struct Corpus {
  std::vector<std::uint8_t> bytes;
  SplitRange train, valid, test;

  const SplitRange& split(SplitName s) const;
};

// Splits are taken in file order: train first, then valid, then test. Sizes
// are floor(fraction * length); fractions must be >= 0 and sum to <= 1.
Corpus make_corpus(std::vector<std::uint8_t> bytes, std::array<double, 3> fractions = {0.9, 0.05, 0.05});
// Throws DataError for unreadable or empty files.
Corpus load_corpus(const std::filesystem::path& path, std::array<double, 3> fractions = {0.9, 0.05, 0.05});

struct Batch {
  std::size_t batch = 0;
  std::size_t time = 0;
  IndexList inputs;   // batch * time, row-major
  IndexList targets;  // inputs shifted by one position
};

// The split is cut into `batch` equal contiguous streams. Every call reads
// `time` inputs (plus one target) at offset `cursor` of each stream and
// advances the cursor by `time`; a stream too short for the next window wraps
// to offset 0. Throws DataError when split length <= batch * (time + 1).
Batch next_batch(const Corpus& corpus, SplitName split, std::size_t batch, std::size_t time, std::size_t& cursor);

// 64-bit FNV-1a over the bytes of one split.
std::uint64_t split_checksum(const Corpus& corpus, SplitName split);

}  // namespace ffx
