#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "deformer/cache_entry.hpp"
#include "deformer/decomposed.hpp"

namespace deformer {

/// Passage cache file (all little-endian):
///
///   "DFRM"  magic
///   u32     format version (1)
///   32 B    model fingerprint
///   u16     split layer k
///   u16     hidden dim d
///   u8      precision (4 = f32, 2 = bfloat16)
///   u64     entry count
///   index   entry count x (content hash u64, payload offset u64, token count u16), sorted by hash
///   payload token_count x d scalars per entry, contiguous, in index order
///
/// Offsets are relative to the start of the payload.
inline constexpr std::uint32_t kCacheVersion = 1;
inline constexpr std::size_t kCacheHeaderBytes = 4 + 4 + 32 + 2 + 2 + 1 + 8;
inline constexpr std::size_t kCacheIndexEntryBytes = 8 + 8 + 2;

struct CacheHeader {
  std::uint32_t version = kCacheVersion;
  Fingerprint fingerprint;
  std::uint16_t split_layer = 0;
  std::uint16_t hidden_dim = 0;
  StoragePrecision precision = StoragePrecision::f32;
  std::uint64_t entry_count = 0;

  friend bool operator==(const CacheHeader&, const CacheHeader&) = default;
};

struct CacheIndexEntry {
  std::uint64_t content_hash = 0;
  std::uint64_t offset = 0;
  std::uint16_t token_count = 0;

  friend bool operator==(const CacheIndexEntry&, const CacheIndexEntry&) = default;
};

class CacheFile {
 public:
  // Entries must share the header's fingerprint, k, d and precision.
  // Duplicate hashes keep the first entry.
  static CacheFile build(const CacheHeader& header, std::span<const CacheEntry> entries);
  static CacheFile parse(std::span<const std::uint8_t> bytes);
  static CacheFile read(const std::filesystem::path& path);

  std::vector<std::uint8_t> serialize() const;
  void write(const std::filesystem::path& path) const;

  const CacheHeader& header() const { return header_; }
  const std::vector<CacheIndexEntry>& index() const { return index_; }
  std::size_t size() const { return index_.size(); }
  std::size_t payload_bytes() const { return payload_.size(); }

  // nullopt on a miss. Throws CacheCompatibilityError when the key's
  // fingerprint or k differs from the header.
  std::optional<CacheEntry> lookup(const CacheKey& key) const;

 private:
  CacheHeader header_;
  std::vector<CacheIndexEntry> index_;
  std::vector<std::uint8_t> payload_;
};

CacheKey cache_key(std::span<const TokenId> passage, const DeformerModel& model);

struct StoreSummary {
  std::size_t passages = 0;
  std::size_t entries = 0;
  std::size_t duplicates = 0;
  std::uint64_t payload_bytes = 0;
  std::uint64_t file_bytes = 0;
  std::uint64_t offline_flops = 0;
};

/// Encodes every unique passage through layers 1..k and writes one cache file.
/// Throws InputError on an empty list or an over-length passage.
StoreSummary encode_and_store(std::span<const std::vector<TokenId>> passages, const DeformerModel& model,
                              StoragePrecision precision, const std::filesystem::path& path);

// Payload bytes only: token_count x hidden_dim x bytes_per_scalar.
std::uint64_t estimate_size(std::uint64_t token_count, std::uint64_t hidden_dim, std::uint64_t bytes_per_scalar);
// Header plus index bytes for `entries` entries.
std::uint64_t cache_overhead_bytes(std::uint64_t entries);

}  // namespace deformer
