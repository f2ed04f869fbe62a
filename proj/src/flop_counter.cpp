#include "deformer/flop_counter.hpp"

#include <numeric>

namespace deformer {

namespace {
thread_local FlopCounter* g_active = nullptr;
}

std::uint64_t FlopCounter::total() const {
  return std::accumulate(by_kind_.begin(), by_kind_.end(), std::uint64_t{0});
}

ScopedFlopCounter::ScopedFlopCounter(FlopCounter& counter) : previous_(g_active) { g_active = &counter; }

ScopedFlopCounter::~ScopedFlopCounter() { g_active = previous_; }

void record_flops(FlopKind kind, std::uint64_t n) {
  if (g_active != nullptr) g_active->add(kind, n);
}

}  // namespace deformer
