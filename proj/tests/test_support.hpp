#pragma once

#include <random>
#include <vector>

#include "deformer/encoder.hpp"

namespace deformer::testing {

// Random weights with non-trivial biases and gains so every parameter matters.
inline EncoderWeights random_weights(const ModelConfig& config, double std = 0.5) {
  ModelConfig c = config;
  c.init_std = std;
  EncoderWeights w = EncoderWeights::initialize(c);
  std::mt19937_64 rng(c.seed ^ 0xabcdefULL);
  std::normal_distribution<double> normal(0.0, 0.3);
  auto perturb = [&](Tensor& t, double base) {
    for (double& v : t.data()) v = base + normal(rng);
  };
  perturb(w.embed_norm_gain, 1.0);
  perturb(w.embed_norm_bias, 0.0);
  for (LayerWeights& lw : w.layers) {
    perturb(lw.query_bias, 0.0);
    perturb(lw.value_bias, 0.0);
    perturb(lw.output_bias, 0.0);
    perturb(lw.attn_norm_gain, 1.0);
    perturb(lw.attn_norm_bias, 0.0);
    perturb(lw.ffn_in_bias, 0.0);
    perturb(lw.ffn_out_bias, 0.0);
    perturb(lw.ffn_norm_gain, 1.0);
    perturb(lw.ffn_norm_bias, 0.0);
  }
  return w;
}

inline std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                                          const ModelConfig& config) {
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<TokenId> id(static_cast<TokenId>(kReservedTokens),
                                            static_cast<TokenId>(config.vocab_size - 1));
  std::vector<TokenId> out(len(rng));
  for (TokenId& t : out) t = id(rng);
  return out;
}

inline ModelConfig tiny_config(std::size_t n, std::size_t d, std::size_t heads, std::uint64_t seed = 7) {
  ModelConfig c;
  c.n_layers = n;
  c.hidden_dim = d;
  c.n_heads = heads;
  c.ffn_dim = 2 * d;
  c.vocab_size = 20;
  c.q_max = 4;
  c.p_max = 10;
  c.max_positions = 24;
  c.layer_norm_eps = 1e-12;
  c.seed = seed;
  return c;
}

}  // namespace deformer::testing
