#include "ffx/data.hpp"

#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "ffx/error.hpp"

namespace ffx {

std::string_view to_string(SplitName s) {
  switch (s) {
    case SplitName::train:
      return "train";
    case SplitName::valid:
      return "valid";
    case SplitName::test:
      return "test";
  }
  return "?";
}

SplitName parse_split(std::string_view s) {
  if (s == "train") return SplitName::train;
  if (s == "valid") return SplitName::valid;
  if (s == "test") return SplitName::test;
  throw ConfigError("unknown split '" + std::string(s) + "' (expected train, valid or test)");
}

const SplitRange& Corpus::split(SplitName s) const {
  switch (s) {
    case SplitName::train:
      return train;
    case SplitName::valid:
      return valid;
    case SplitName::test:
      return test;
  }
  throw ArgumentError("unknown split");
}

Corpus make_corpus(std::vector<std::uint8_t> bytes, std::array<double, 3> fractions) {
  if (bytes.empty()) throw DataError("corpus is empty");
  double total = 0;
  for (double f : fractions) {
    if (!(f >= 0)) throw ConfigError("split fractions must be non-negative");
    total += f;
  }
  if (total > 1 + 1e-12) throw ConfigError("split fractions sum to " + std::to_string(total) + ", more than 1");

  Corpus c;
  const double n = static_cast<double>(bytes.size());
  // The small epsilon keeps fractions like 0.8 * 100 from flooring to 79.
  auto take = [&](double f) { return static_cast<std::size_t>(std::floor(f * n + 1e-9)); };
  c.train = {0, take(fractions[0])};
  c.valid = {c.train.end, c.train.end + take(fractions[1])};
  c.test = {c.valid.end, std::min(bytes.size(), c.valid.end + take(fractions[2]))};
  c.bytes = std::move(bytes);
  return c;
}

Corpus load_corpus(const std::filesystem::path& path, std::array<double, 3> fractions) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read corpus file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw DataError("corpus file " + path.string() + " is empty");
  return make_corpus(std::move(bytes), fractions);
}

Batch next_batch(const Corpus& corpus, SplitName split, std::size_t batch, std::size_t time, std::size_t& cursor) {
  const SplitRange& r = corpus.split(split);
  if (batch == 0 || time == 0) throw ArgumentError("next_batch: batch and time must be positive");
  if (r.size() <= batch * (time + 1))
    throw DataError(std::string(to_string(split)) + " split has " + std::to_string(r.size()) +
                    " bytes, need more than " + std::to_string(batch * (time + 1)) + " for " + std::to_string(batch) +
                    " streams of " + std::to_string(time) + " tokens");
  const std::size_t stream = r.size() / batch;
  if (cursor + time + 1 > stream) cursor = 0;
  Batch b{batch, time, IndexList(batch * time), IndexList(batch * time)};
  for (std::size_t s = 0; s < batch; ++s) {
    const std::uint8_t* base = corpus.bytes.data() + r.begin + s * stream + cursor;
    for (std::size_t t = 0; t < time; ++t) {
      b.inputs[s * time + t] = base[t];
      b.targets[s * time + t] = base[t + 1];
    }
  }
  cursor += time;
  return b;
}

std::uint64_t split_checksum(const Corpus& corpus, SplitName split) {
  const SplitRange& r = corpus.split(split);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = r.begin; i < r.end; ++i) {
    h ^= corpus.bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace ffx
