#pragma once

#include <array>
#include <cstdint>

namespace deformer {

// Per-element costs charged by the non-matmul primitives. The analytic model in
// metering.hpp uses the same constants so instrumented and analytic counts
// agree exactly.
namespace flop_cost {
inline constexpr std::uint64_t kSoftmaxPerElement = 5;    // max, sub, exp, sum, div
inline constexpr std::uint64_t kLayerNormPerElement = 8;  // mean, var (3), normalise (2), affine (2)
inline constexpr std::uint64_t kGeluPerElement = 8;
inline constexpr std::uint64_t kElementwise = 1;  // add, scale, bias add, log, ...
}  // namespace flop_cost

enum class FlopKind : std::uint8_t { matmul, elementwise, softmax, layer_norm, gelu, count_ };

/// Accumulates FLOPs reported by tensor primitives while it is installed.
class FlopCounter {
 public:
  void add(FlopKind kind, std::uint64_t n) { by_kind_[static_cast<std::size_t>(kind)] += n; }
  std::uint64_t of(FlopKind kind) const { return by_kind_[static_cast<std::size_t>(kind)]; }
  std::uint64_t total() const;
  void reset() { by_kind_.fill(0); }

 private:
  std::array<std::uint64_t, static_cast<std::size_t>(FlopKind::count_)> by_kind_{};
};

// Installs a counter on the current thread for the lifetime of the guard.
// Guards nest; the innermost counter receives the counts.
class ScopedFlopCounter {
 public:
  explicit ScopedFlopCounter(FlopCounter& counter);
  ~ScopedFlopCounter();
  ScopedFlopCounter(const ScopedFlopCounter&) = delete;
  ScopedFlopCounter& operator=(const ScopedFlopCounter&) = delete;

 private:
  FlopCounter* previous_;
};

void record_flops(FlopKind kind, std::uint64_t n);

}  // namespace deformer
