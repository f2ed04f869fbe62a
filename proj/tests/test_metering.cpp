#include <gtest/gtest.h>

#include <random>

#include "deformer/cache_store.hpp"
#include "deformer/decomposed.hpp"
#include "deformer/errors.hpp"
#include "deformer/metering.hpp"
#include "test_support.hpp"

using namespace deformer;
using deformer::testing::random_tokens;
using deformer::testing::random_weights;

namespace {

ModelConfig shape(std::size_t n, std::size_t d, std::size_t h, std::size_t ffn) {
  ModelConfig c;
  c.n_layers = n;
  c.hidden_dim = d;
  c.n_heads = h;
  c.ffn_dim = ffn;
  c.vocab_size = 30522;
  c.max_positions = 512;
  c.q_max = 64;
  c.p_max = 440;
  return c;
}

ModelConfig random_tiny(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> n(0, 4), heads(1, 4), per_head(1, 4), ffn(4, 24), q(1, 5), p(1, 9);
  ModelConfig c;
  c.n_layers = n(rng);
  c.n_heads = heads(rng);
  c.hidden_dim = c.n_heads * per_head(rng);
  c.ffn_dim = ffn(rng);
  c.vocab_size = 16;
  c.q_max = q(rng);
  c.p_max = p(rng);
  c.max_positions = c.q_max + c.p_max + 3;
  c.seed = rng();
  return c;
}

}  // namespace

TEST(FlopsFull, BertBaseTable3) {
  const double g = static_cast<double>(flops_full(shape(12, 768, 12, 3072), 32, 285).total()) / 1e9;
  EXPECT_NEAR(g, 58.4, 58.4 * 0.03) << g;
}

TEST(FlopsFull, BertLargeTable3) {
  const double g = static_cast<double>(flops_full(shape(24, 1024, 16, 4096), 32, 285).total()) / 1e9;
  EXPECT_NEAR(g, 204.1, 204.1 * 0.03) << g;
}

TEST(FlopsFull, PerLayerClosedForm) {
  // s=6, d=8, ffn=16, h=2: 8sd^2 + 4s^2d + 6hs^2 + 4sdf + 9sf + 22sd.
  const ModelConfig c = shape(2, 8, 2, 16);
  const std::uint64_t s = 6, d = 8, f = 16, h = 2;
  const std::uint64_t per_layer = 8 * s * d * d + 4 * s * s * d + 6 * h * s * s + 4 * s * d * f + 9 * s * f + 22 * s * d;
  EXPECT_EQ(layer_flops(c, s).total(), per_layer);
  const FlopReport r = flops_full(c, 1, 2);
  EXPECT_EQ(r.total(), 2 * per_layer + 10 * s * d + 4 * s * d + 10 * s);
  EXPECT_EQ(r.offline, 0u);
  EXPECT_EQ(r.embedding + r.attention + r.ffn + r.head, r.total());
}

TEST(CountOracle, SingleMatmul) {
  const Tensor a({2, 3}, 1.0), b({3, 4}, 1.0);
  EXPECT_EQ(count_oracle([&] { (void)matmul(a, b); }), 48u);
}

TEST(CountOracle, TinyEncoderMatchesAnalyticExactly) {
  ModelConfig c = shape(2, 8, 2, 16);
  c.vocab_size = 16;
  c.q_max = 1;
  c.p_max = 2;
  c.max_positions = 6;
  const EncoderWeights w = random_weights(c);
  const std::vector<TokenId> q{5}, p{6, 7};
  const SegmentPair pair = pack_pair(q, p, c);
  ASSERT_EQ(pair.length(), 6u);
  const std::uint64_t counted = count_oracle([&] { (void)qa_head(encode_full(pair, w), pair, w); });
  EXPECT_EQ(counted, flops_full(c, 1, 2).total());
}

TEST(CountOracle, TwentyRandomConfigsFullAndDecomposed) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig c = random_tiny(rng);
    const EncoderWeights w = random_weights(c);
    const auto q = random_tokens(rng, 1, c.q_max, c), p = random_tokens(rng, 1, c.p_max, c);
    const SegmentPair pair = pack_pair(q, p, c);
    const std::uint64_t full = count_oracle([&] { (void)qa_head(encode_full(pair, w), pair, w); });
    EXPECT_EQ(full, flops_full(c, c.q_max, p.size()).total()) << "trial " << trial;

    const std::size_t k = std::uniform_int_distribution<std::size_t>(0, c.n_layers)(rng);
    const DeformerModel m = transfer_weights(w, k);
    const FlopReport analytic = flops_decomposed(c, c.q_max, p.size(), k);
    const std::uint64_t inline_count = count_oracle([&] { (void)deformer_forward(q, p, m); });
    EXPECT_EQ(inline_count, analytic.online + analytic.offline) << "trial " << trial << " k=" << k;

    if (k > 0) {
      CacheEntry entry;
      std::uint64_t offline = 0;
      offline = count_oracle([&] {
        const SegmentStates s = encode_lower(p, SegmentRole::passage, m);
        entry.key = cache_key(p, m);
        entry.token_count = static_cast<std::uint16_t>(s.rows());
        entry.states = s.top();
      });
      EXPECT_EQ(offline, analytic.offline);
      const std::uint64_t online = count_oracle([&] { (void)deformer_forward(q, entry, m); });
      EXPECT_EQ(online, analytic.online);
      EXPECT_EQ(analytic.cache_bytes, (p.size() + 1) * c.hidden_dim * 4);
    }
  }
}

TEST(FlopsDecomposed, ZeroSplitEqualsFull) {
  const ModelConfig c = shape(12, 768, 12, 3072);
  const FlopReport full = flops_full(c, 32, 286), dec = flops_decomposed(c, 32, 286, 0);
  EXPECT_EQ(dec.online, full.online);
  EXPECT_EQ(dec.offline, 0u);
  EXPECT_EQ(dec.cache_bytes, 0u);
}

TEST(FlopsDecomposed, FullSplitHasNoJointLayers) {
  const ModelConfig c = shape(4, 64, 4, 256);
  const FlopReport dec = flops_decomposed(c, 8, 40, 4);
  const std::uint64_t q_only = layer_flops(c, 10).total();
  for (std::uint64_t v : dec.layer_online) EXPECT_EQ(v, q_only);
  EXPECT_THROW(flops_decomposed(c, 8, 40, 5), ParameterError);
}

TEST(FlopsDecomposed, OnlineStrictlyDecreasingInK) {
  const ModelConfig c = shape(12, 768, 12, 3072);
  for (std::uint64_t p : {1u, 50u, 286u}) {
    std::uint64_t prev = flops_decomposed(c, 32, p, 0).online;
    for (std::size_t k = 1; k <= 12; ++k) {
      const std::uint64_t cur = flops_decomposed(c, 32, p, k).online;
      EXPECT_LT(cur, prev);
      prev = cur;
    }
  }
}

TEST(FlopsDecomposed, SpeedupBracketsTable1) {
  const ModelConfig c = shape(12, 768, 12, 3072);
  const double speedup = static_cast<double>(flops_full(c, 32, 286).online) /
                         static_cast<double>(flops_decomposed(c, 32, 286, 9).online);
  EXPECT_GE(speedup, 2.4);
  EXPECT_LE(speedup, 4.0);
}

TEST(MemoryEstimate, HandComputedLivenessTable) {
  // n=2, d=8, h=2, ffn=16, q=2, p=3: s=8, question block 4 rows.
  //   full:       layer0 8*8 + 2*64 + 8*16 = 320, layer1 320      -> 640 scalars
  //   decomposed: layer0 4*8 + 2*16 + 4*16 = 128, layer1 320      -> 448 scalars
  const ModelConfig c = shape(2, 8, 2, 16);
  EXPECT_EQ(memory_estimate(c, 2, 3, 1, MemoryMode::full), 640u * 4);
  EXPECT_EQ(memory_estimate(c, 2, 3, 1, MemoryMode::decomposed), 448u * 4);
  EXPECT_EQ(memory_estimate(c, 2, 3, 0, MemoryMode::decomposed), memory_estimate(c, 2, 3, 0, MemoryMode::full));
}

TEST(MemoryEstimate, ReductionBracketsTable1) {
  const ModelConfig c = shape(12, 768, 12, 3072);
  const double full = static_cast<double>(memory_estimate(c, 32, 286, 9, MemoryMode::full));
  const double dec = static_cast<double>(memory_estimate(c, 32, 286, 9, MemoryMode::decomposed));
  const double reduction = 1.0 - dec / full;
  EXPECT_GE(reduction, 0.55);
  EXPECT_LE(reduction, 0.80);
}

TEST(Cost, AppendixFigures) {
  CostParams p;
  p.t_b = 4.6;
  EXPECT_NEAR(cost_original(p), 148.5, 0.1);
  p.t_b = 1.4;
  const CostBreakdown d = cost_decomposed(p);
  EXPECT_NEAR(d.total(), 61.7, 0.1);
  EXPECT_LT(d.total(), 148.5);
  p.s = 0;
  p.r_u = 0;
  EXPECT_NEAR(cost_decomposed(p).total(), 45.2, 0.1);
}

TEST(Cost, LinearityZeroVolumeAndErrors) {
  CostParams p;
  const double base = cost_original(p);
  p.g_u *= 2;
  EXPECT_DOUBLE_EQ(cost_original(p), 2 * base);
  p.n_seq = 0;
  EXPECT_EQ(cost_original(p), 0.0);
  p.b = 0;
  EXPECT_THROW(cost_original(p), ParameterError);
  EXPECT_THROW(cost_decomposed(p), ParameterError);
}
