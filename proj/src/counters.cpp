#include "ffx/counters.hpp"

namespace ffx {

namespace {
thread_local MacCounter* t_counter = nullptr;
thread_local const char* t_category = "ff";
}  // namespace

std::uint64_t MacCounter::total() const {
  std::uint64_t sum = 0;
  for (const auto& [name, n] : by_category) sum += n;
  return sum;
}

std::uint64_t MacCounter::get(const std::string& category) const {
  auto it = by_category.find(category);
  return it == by_category.end() ? 0 : it->second;
}

void count_macs(std::uint64_t n) {
  if (t_counter) t_counter->by_category[t_category] += n;
}

MacCountingScope::MacCountingScope(MacCounter& counter) : previous_(t_counter) { t_counter = &counter; }
MacCountingScope::~MacCountingScope() { t_counter = previous_; }

MacCategory::MacCategory(const char* category) : previous_(t_category) { t_category = category; }
MacCategory::~MacCategory() { t_category = previous_; }

}  // namespace ffx
