#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace ffx {

// Multiply-accumulate counts attributed to named categories. Kernels report
// into whichever counter is active on the calling thread; with no active
// counter reporting is a no-op.
struct MacCounter {
  std::map<std::string, std::uint64_t> by_category;

  std::uint64_t total() const;
  std::uint64_t get(const std::string& category) const;
};

void count_macs(std::uint64_t n);

// Makes `counter` the active counter for this thread until destruction.
class MacCountingScope {
 public:
  explicit MacCountingScope(MacCounter& counter);
  ~MacCountingScope();
  MacCountingScope(const MacCountingScope&) = delete;
  MacCountingScope& operator=(const MacCountingScope&) = delete;

 private:
  MacCounter* previous_;
};

// Attributes reported MACs to `category` until destruction. The default
// category is "ff".
class MacCategory {
 public:
  explicit MacCategory(const char* category);
  ~MacCategory();
  MacCategory(const MacCategory&) = delete;
  MacCategory& operator=(const MacCategory&) = delete;

 private:
  const char* previous_;
};

}  // namespace ffx
