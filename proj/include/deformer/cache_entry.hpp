#pragma once

#include <cstdint>

#include "deformer/fingerprint.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

// How cached passage states are stored. The numeric value is the on-disk
// precision byte (bytes per scalar); `exact` never reaches disk.
enum class StoragePrecision : std::uint8_t { exact = 0, truncated16 = 2, f32 = 4 };

std::size_t bytes_per_scalar(StoragePrecision p);
const char* to_string(StoragePrecision p);
StoragePrecision storage_precision_from_string(const std::string& s);

// Value after a round trip through the storage format.
double quantize(double v, StoragePrecision p);
Tensor quantize(const Tensor& t, StoragePrecision p);

// Nearest bfloat16 as the high 16 bits of its f32 pattern, and back.
std::uint16_t to_bfloat16_bits(double v);
double from_bfloat16_bits(std::uint16_t bits);

struct CacheKey {
  std::uint64_t content_hash = 0;  // fnv1a64_token_ids over the passage ids
  Fingerprint fingerprint;         // of the DeFormer weights
  std::uint16_t split_layer = 0;

  friend bool operator==(const CacheKey&, const CacheKey&) = default;
};

/// A passage's layer-k representation as served from the cache.
struct CacheEntry {
  CacheKey key;
  std::uint16_t token_count = 0;  // stored rows: passage tokens + closing [SEP]
  Tensor states;                  // token_count x d
  StoragePrecision precision = StoragePrecision::f32;
};

}  // namespace deformer
