#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>
#include <set>

#include "deformer/binary_io.hpp"
#include "deformer/cache_store.hpp"
#include "deformer/errors.hpp"
#include "test_support.hpp"

using namespace deformer;
using deformer::testing::random_tokens;
using deformer::testing::random_weights;
using deformer::testing::tiny_config;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("deformer_cache_" + name + ".dfrm");
}

DeformerModel small_model(std::size_t k = 2) {
  ModelConfig c = tiny_config(3, 8, 2, 31);
  c.vocab_size = 200;
  EncoderWeights w = random_weights(c);
  w.round_to_f32();
  return transfer_weights(w, k);
}

std::vector<std::vector<TokenId>> distinct_passages(std::mt19937_64& rng, std::size_t count, const ModelConfig& c,
                                                    std::set<std::vector<TokenId>>& used) {
  std::vector<std::vector<TokenId>> out;
  while (out.size() < count) {
    auto p = random_tokens(rng, 1, c.p_max, c);
    if (used.insert(p).second) out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

TEST(CacheKeyHash, FnvOfLittleEndianIdsMatchesReference) {
  // FNV-1a 64 over the bytes 01 00 00 00 02 00 00 00, folded by hand.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : {1, 0, 0, 0, 2, 0, 0, 0}) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  const std::vector<std::uint32_t> ids{1, 2};
  EXPECT_EQ(fnv1a64_token_ids(ids), h);
  EXPECT_EQ(fnv1a64_token_ids({}), 0xcbf29ce484222325ULL);
}

TEST(EstimateSize, ReferenceStorageFigures) {
  EXPECT_EQ(estimate_size(150, 768, 2), 230400u);
  EXPECT_NEAR(static_cast<double>(estimate_size(150, 768, 2)) / 1024.0, 226.0, 1.0);
  EXPECT_EQ(estimate_size(1, 1, 4), 4u);
  // One million passages at the per-passage KB figure, 1 GB = 10^6 KB.
  const double total_gb = 1e6 * (static_cast<double>(estimate_size(150, 768, 2)) / 1024.0) / 1e6;
  EXPECT_NEAR(total_gb, 226.0, 1.0);
}

TEST(EncodeAndStore, DuplicatesCollapseToOneEntry) {
  const DeformerModel m = small_model();
  const std::vector<std::vector<TokenId>> passages{{5, 6, 7}, {5, 6, 7}};
  const auto path = temp_path("dup");
  const StoreSummary s = encode_and_store(passages, m, StoragePrecision::f32, path);
  EXPECT_EQ(s.entries, 1u);
  EXPECT_EQ(s.duplicates, 1u);
  EXPECT_EQ(s.payload_bytes, 4u * 8u * 4u);
  EXPECT_EQ(s.file_bytes, std::filesystem::file_size(path));
  EXPECT_GT(s.offline_flops, 0u);
  std::filesystem::remove(path);
}

TEST(EncodeAndStore, RejectsEmptyListOverLengthAndUnwritablePath) {
  const DeformerModel m = small_model();
  EXPECT_THROW(encode_and_store({}, m, StoragePrecision::f32, temp_path("empty")), InputError);
  const std::vector<std::vector<TokenId>> too_long{std::vector<TokenId>(m.config().p_max + 1, 5)};
  EXPECT_THROW(encode_and_store(too_long, m, StoragePrecision::f32, temp_path("long")), InputError);
  const std::vector<std::vector<TokenId>> ok{{5}};
  EXPECT_THROW(encode_and_store(ok, m, StoragePrecision::f32, "/nonexistent-dir/x/cache.dfrm"), IoError);
}

TEST(EncodeAndStore, StoredStatesEqualInlineEncoding) {
  const DeformerModel m = small_model();
  std::mt19937_64 rng(3);
  std::set<std::vector<TokenId>> used;
  const auto passages = distinct_passages(rng, 20, m.config(), used);
  for (StoragePrecision prec : {StoragePrecision::f32, StoragePrecision::truncated16}) {
    const auto path = temp_path("inline");
    encode_and_store(passages, m, prec, path);
    const CacheFile file = CacheFile::read(path);
    for (const auto& p : passages) {
      const auto entry = file.lookup(cache_key(p, m));
      ASSERT_TRUE(entry.has_value());
      const Tensor inline_states = encode_lower(p, SegmentRole::passage, m).top();
      ASSERT_TRUE(entry->states.same_shape(inline_states));
      if (prec == StoragePrecision::f32) {
        EXPECT_TRUE(entry->states.bit_equal(inline_states.rounded_to_f32()));
      } else {
        for (std::size_t i = 0; i < inline_states.size(); ++i) {
          const double x = inline_states[i];
          EXPECT_LE(std::abs(entry->states[i] - x), std::ldexp(std::abs(x), -8));
        }
      }
    }
    std::filesystem::remove(path);
  }
}

TEST(Lookup, HundredHitsAndNoFalseHits) {
  const DeformerModel m = small_model();
  std::mt19937_64 rng(44);
  std::set<std::vector<TokenId>> used;
  const auto stored = distinct_passages(rng, 100, m.config(), used);
  const auto novel = distinct_passages(rng, 100, m.config(), used);
  const auto path = temp_path("hits");
  encode_and_store(stored, m, StoragePrecision::f32, path);
  const CacheFile file = CacheFile::read(path);
  int hits = 0, false_hits = 0;
  for (const auto& p : stored) {
    const auto e = file.lookup(cache_key(p, m));
    if (e && e->token_count == p.size() + 1) ++hits;
  }
  for (const auto& p : novel) false_hits += file.lookup(cache_key(p, m)).has_value() ? 1 : 0;
  EXPECT_EQ(hits, 100);
  EXPECT_EQ(false_hits, 0);
  std::filesystem::remove(path);
}

TEST(Lookup, ForeignModelKeyRejected) {
  const DeformerModel m = small_model(2);
  const std::vector<std::vector<TokenId>> passages{{5, 6}};
  const auto path = temp_path("foreign");
  encode_and_store(passages, m, StoragePrecision::f32, path);
  const CacheFile file = CacheFile::read(path);
  CacheKey key = cache_key(passages[0], m);
  key.split_layer = 1;
  EXPECT_THROW(file.lookup(key), CacheCompatibilityError);
  std::filesystem::remove(path);
}

TEST(CacheFileFormat, RoundTripIsByteIdentical) {
  const DeformerModel m = small_model();
  std::mt19937_64 rng(5);
  std::set<std::vector<TokenId>> used;
  const auto passages = distinct_passages(rng, 30, m.config(), used);
  for (StoragePrecision prec : {StoragePrecision::f32, StoragePrecision::truncated16}) {
    const auto path = temp_path("roundtrip");
    encode_and_store(passages, m, prec, path);
    const std::vector<std::uint8_t> bytes = binary::read_file(path);
    const CacheFile parsed = CacheFile::parse(bytes);
    EXPECT_EQ(parsed.serialize(), bytes);
    EXPECT_EQ(parsed.header().fingerprint, m.weights_fingerprint());
    EXPECT_EQ(parsed.header().split_layer, m.split_layer);
    EXPECT_EQ(parsed.header().hidden_dim, m.config().hidden_dim);
    EXPECT_EQ(parsed.header().precision, prec);
    EXPECT_EQ(parsed.header().entry_count, passages.size());
    for (std::size_t i = 1; i < parsed.index().size(); ++i) {
      EXPECT_LT(parsed.index()[i - 1].offset, parsed.index()[i].offset);
      EXPECT_LT(parsed.index()[i - 1].content_hash, parsed.index()[i].content_hash);
    }
    // Rebuilding from looked-up entries reproduces the same bytes.
    std::vector<CacheEntry> entries;
    for (const auto& p : passages) entries.push_back(*parsed.lookup(cache_key(p, m)));
    EXPECT_EQ(CacheFile::build(parsed.header(), entries).serialize(), bytes);
    std::filesystem::remove(path);
  }
}

TEST(CacheFileFormat, HeaderFieldsAtDocumentedOffsets) {
  const DeformerModel m = small_model(1);
  const std::vector<std::vector<TokenId>> passages{{5, 6}, {7}};
  const auto path = temp_path("layout");
  encode_and_store(passages, m, StoragePrecision::truncated16, path);
  const std::vector<std::uint8_t> b = binary::read_file(path);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "DFRM");
  EXPECT_EQ(b[4], 1);
  EXPECT_TRUE(std::equal(b.begin() + 8, b.begin() + 40, m.weights_fingerprint().bytes.begin()));
  EXPECT_EQ(b[40] | (b[41] << 8), 1);
  EXPECT_EQ(b[42] | (b[43] << 8), 8);
  EXPECT_EQ(b[44], 2);
  EXPECT_EQ(b[45], 2);
  const std::size_t payload = kCacheHeaderBytes + 2 * kCacheIndexEntryBytes;
  EXPECT_EQ(b.size(), payload + (3 + 2) * 8 * 2);
  std::filesystem::remove(path);
}

TEST(CacheFileFormat, InsertionOrderNeverChangesBytes) {
  const DeformerModel m = small_model();
  std::mt19937_64 rng(6);
  std::set<std::vector<TokenId>> used;
  auto passages = distinct_passages(rng, 25, m.config(), used);
  const auto path = temp_path("order");
  encode_and_store(passages, m, StoragePrecision::f32, path);
  const auto reference = binary::read_file(path);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(passages.begin(), passages.end(), rng);
    encode_and_store(passages, m, StoragePrecision::f32, path);
    EXPECT_EQ(binary::read_file(path), reference);
  }
  std::filesystem::remove(path);
}

TEST(CacheFileFormat, CorruptionDetected) {
  const DeformerModel m = small_model();
  const std::vector<std::vector<TokenId>> passages{{5, 6}, {7, 8, 9}, {10}};
  const auto path = temp_path("corrupt");
  encode_and_store(passages, m, StoragePrecision::f32, path);
  const std::vector<std::uint8_t> good = binary::read_file(path);
  std::filesystem::remove(path);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(CacheFile::parse(bad_magic), FormatError);

  auto bad_offset = good;
  bad_offset[kCacheHeaderBytes + kCacheIndexEntryBytes + 8] ^= 0x10;
  EXPECT_THROW(CacheFile::parse(bad_offset), FormatError);

  auto truncated = good;
  truncated.pop_back();
  EXPECT_THROW(CacheFile::parse(truncated), FormatError);

  auto bad_precision = good;
  bad_precision[44] = 3;
  EXPECT_THROW(CacheFile::parse(bad_precision), FormatError);

  auto bad_count = good;
  bad_count[45] = 0xFF;
  EXPECT_THROW(CacheFile::parse(bad_count), FormatError);

  auto nan_value = good;
  const float nan = std::nanf("");
  std::memcpy(nan_value.data() + nan_value.size() - 4, &nan, 4);
  const CacheFile parsed = CacheFile::parse(nan_value);
  bool threw = false;
  for (const auto& p : passages) {
    try {
      (void)parsed.lookup(cache_key(p, m));
    } catch (const FormatError&) {
      threw = true;
    }
  }
  EXPECT_TRUE(threw);
}
