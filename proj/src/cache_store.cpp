#include "deformer/cache_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <unordered_set>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"
#include "deformer/flop_counter.hpp"

namespace deformer {

namespace {

std::uint64_t block_bytes(std::uint16_t token_count, const CacheHeader& h) {
  return std::uint64_t{token_count} * h.hidden_dim * bytes_per_scalar(h.precision);
}

void check_disk_precision(StoragePrecision p) {
  if (p != StoragePrecision::f32 && p != StoragePrecision::truncated16) {
    throw ParameterError(std::string("precision '") + to_string(p) + "' cannot be written to a cache file");
  }
}

void encode_block(binary::Writer& out, const Tensor& states, StoragePrecision p) {
  for (double v : states.data()) {
    if (!std::isfinite(v)) throw NumericalError("cannot cache a non-finite representation");
    if (p == StoragePrecision::f32) {
      out.put(static_cast<float>(v));
    } else {
      out.put(to_bfloat16_bits(v));
    }
  }
}

}  // namespace

CacheFile CacheFile::build(const CacheHeader& header, std::span<const CacheEntry> entries) {
  check_disk_precision(header.precision);
  std::vector<const CacheEntry*> sorted;
  std::unordered_set<std::uint64_t> seen;
  for (const CacheEntry& e : entries) {
    if (e.key.fingerprint != header.fingerprint || e.key.split_layer != header.split_layer) {
      throw CacheCompatibilityError("entry key does not match the cache header");
    }
    if (e.states.rows() != e.token_count || e.states.cols() != header.hidden_dim) {
      throw ShapeError("entry states " + e.states.shape_string() + " do not match token count and width");
    }
    if (seen.insert(e.key.content_hash).second) sorted.push_back(&e);
  }
  std::sort(sorted.begin(), sorted.end(),
            [](const CacheEntry* a, const CacheEntry* b) { return a->key.content_hash < b->key.content_hash; });

  CacheFile file;
  file.header_ = header;
  file.header_.version = kCacheVersion;
  file.header_.entry_count = sorted.size();
  binary::Writer payload;
  for (const CacheEntry* e : sorted) {
    file.index_.push_back({e->key.content_hash, payload.size(), e->token_count});
    encode_block(payload, e->states, header.precision);
  }
  file.payload_ = payload.bytes();
  return file;
}

std::vector<std::uint8_t> CacheFile::serialize() const {
  binary::Writer out;
  out.put_magic("DFRM");
  out.put(header_.version);
  out.put_bytes(header_.fingerprint.bytes);
  out.put(header_.split_layer);
  out.put(header_.hidden_dim);
  out.put(static_cast<std::uint8_t>(header_.precision));
  out.put(header_.entry_count);
  for (const CacheIndexEntry& e : index_) {
    out.put(e.content_hash);
    out.put(e.offset);
    out.put(e.token_count);
  }
  out.put_bytes(payload_);
  return out.bytes();
}

CacheFile CacheFile::parse(std::span<const std::uint8_t> bytes) {
  binary::Reader in(bytes, "cache file");
  in.expect_magic("DFRM");
  CacheFile file;
  CacheHeader& h = file.header_;
  h.version = in.get<std::uint32_t>();
  if (h.version != kCacheVersion) throw FormatError("cache file version " + std::to_string(h.version) + " unsupported");
  const auto fp = in.get_bytes(32);
  std::copy(fp.begin(), fp.end(), h.fingerprint.bytes.begin());
  h.split_layer = in.get<std::uint16_t>();
  h.hidden_dim = in.get<std::uint16_t>();
  const auto precision = in.get<std::uint8_t>();
  if (precision != 2 && precision != 4) throw FormatError("cache file precision byte " + std::to_string(precision));
  h.precision = static_cast<StoragePrecision>(precision);
  h.entry_count = in.get<std::uint64_t>();
  if (h.hidden_dim == 0) throw FormatError("cache file hidden dim is 0");
  if (h.entry_count > in.remaining() / kCacheIndexEntryBytes) throw FormatError("cache index exceeds file size");

  std::uint64_t expected_offset = 0;
  for (std::uint64_t i = 0; i < h.entry_count; ++i) {
    CacheIndexEntry e;
    e.content_hash = in.get<std::uint64_t>();
    e.offset = in.get<std::uint64_t>();
    e.token_count = in.get<std::uint16_t>();
    if (!file.index_.empty() && e.content_hash <= file.index_.back().content_hash) {
      throw FormatError("cache index is not strictly sorted by key");
    }
    if (e.token_count == 0 || e.offset != expected_offset) {
      throw FormatError("cache index entry " + std::to_string(i) + " has an out-of-bounds offset");
    }
    expected_offset += block_bytes(e.token_count, h);
    file.index_.push_back(e);
  }
  if (in.remaining() != expected_offset) {
    throw FormatError("cache payload holds " + std::to_string(in.remaining()) + " bytes, index expects " +
                      std::to_string(expected_offset));
  }
  const auto payload = in.get_bytes(in.remaining());
  file.payload_.assign(payload.begin(), payload.end());
  return file;
}

CacheFile CacheFile::read(const std::filesystem::path& path) { return parse(binary::read_file(path)); }

void CacheFile::write(const std::filesystem::path& path) const { binary::write_file_atomic(path, serialize()); }

std::optional<CacheEntry> CacheFile::lookup(const CacheKey& key) const {
  if (key.fingerprint != header_.fingerprint || key.split_layer != header_.split_layer) {
    throw CacheCompatibilityError("cache file was built for a different model or split layer");
  }
  const auto it = std::lower_bound(index_.begin(), index_.end(), key.content_hash,
                                   [](const CacheIndexEntry& e, std::uint64_t h) { return e.content_hash < h; });
  if (it == index_.end() || it->content_hash != key.content_hash) return std::nullopt;

  const std::uint64_t n = block_bytes(it->token_count, header_);
  if (it->offset > payload_.size() || n > payload_.size() - it->offset) {
    throw FormatError("cache block outside payload");
  }
  binary::Reader in(std::span<const std::uint8_t>(payload_).subspan(it->offset, n), "cache block");
  CacheEntry entry;
  entry.key = key;
  entry.token_count = it->token_count;
  entry.precision = header_.precision;
  entry.states = Tensor({it->token_count, header_.hidden_dim});
  for (double& v : entry.states.data()) {
    v = header_.precision == StoragePrecision::f32 ? static_cast<double>(in.get<float>())
                                                   : from_bfloat16_bits(in.get<std::uint16_t>());
    if (!std::isfinite(v)) throw FormatError("cache block holds a non-finite value");
  }
  return entry;
}

CacheKey cache_key(std::span<const TokenId> passage, const DeformerModel& model) {
  return {fnv1a64_token_ids(passage), model.weights_fingerprint(), static_cast<std::uint16_t>(model.split_layer)};
}

StoreSummary encode_and_store(std::span<const std::vector<TokenId>> passages, const DeformerModel& model,
                              StoragePrecision precision, const std::filesystem::path& path) {
  if (passages.empty()) throw InputError("no passages to cache");
  check_disk_precision(precision);
  CacheHeader header;
  header.fingerprint = model.weights_fingerprint();
  header.split_layer = static_cast<std::uint16_t>(model.split_layer);
  header.hidden_dim = static_cast<std::uint16_t>(model.config().hidden_dim);
  header.precision = precision;

  StoreSummary summary;
  summary.passages = passages.size();
  std::vector<CacheEntry> entries;
  std::unordered_set<std::uint64_t> seen;
  FlopCounter flops;
  for (const std::vector<TokenId>& p : passages) {
    CacheKey key{fnv1a64_token_ids(p), header.fingerprint, header.split_layer};
    if (!seen.insert(key.content_hash).second) {
      ++summary.duplicates;
      continue;
    }
    SegmentStates states;
    {
      ScopedFlopCounter scope(flops);
      states = encode_lower(p, SegmentRole::passage, model);
    }
    CacheEntry e;
    e.key = key;
    e.token_count = static_cast<std::uint16_t>(states.rows());
    e.states = quantize(states.top(), precision);
    e.precision = precision;
    entries.push_back(std::move(e));
  }
  const CacheFile file = CacheFile::build(header, entries);
  file.write(path);
  summary.entries = file.size();
  summary.payload_bytes = file.payload_bytes();
  summary.file_bytes = cache_overhead_bytes(file.size()) + file.payload_bytes();
  summary.offline_flops = flops.total();
  return summary;
}

std::uint64_t estimate_size(std::uint64_t token_count, std::uint64_t hidden_dim, std::uint64_t bytes_per_scalar) {
  return token_count * hidden_dim * bytes_per_scalar;
}

std::uint64_t cache_overhead_bytes(std::uint64_t entries) {
  return kCacheHeaderBytes + entries * kCacheIndexEntryBytes;
}

}  // namespace deformer
