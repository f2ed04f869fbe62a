#include "deformer/metering.hpp"

#include <cmath>

#include "deformer/errors.hpp"
#include "deformer/flop_counter.hpp"

namespace deformer {

namespace fc = flop_cost;

LayerFlops layer_flops(const ModelConfig& config, std::uint64_t s) {
  const std::uint64_t d = config.hidden_dim, f = config.ffn_dim, h = config.n_heads;
  LayerFlops out;
  out.attention = 8 * s * d * d                       // Q, K, V, output projections
                  + 4 * s * s * d                     // scores and context
                  + h * s * s * (fc::kElementwise + fc::kSoftmaxPerElement)  // scale, softmax
                  + 4 * s * d * fc::kElementwise      // three biases, residual
                  + s * d * fc::kLayerNormPerElement;
  out.ffn = 4 * s * d * f                             // two matmuls
            + s * f * (fc::kElementwise + fc::kGeluPerElement)
            + 2 * s * d * fc::kElementwise            // output bias, residual
            + s * d * fc::kLayerNormPerElement;
  return out;
}

std::uint64_t embedding_flops(const ModelConfig& config, std::uint64_t rows) {
  return rows * config.hidden_dim * (2 * fc::kElementwise + fc::kLayerNormPerElement);
}

std::uint64_t head_flops(const ModelConfig& config, std::uint64_t rows) {
  return 4 * rows * config.hidden_dim + 2 * rows * fc::kSoftmaxPerElement;
}

namespace {

void add_layer(FlopReport& r, std::size_t index, const LayerFlops& l, bool online) {
  r.attention += l.attention;
  r.ffn += l.ffn;
  (online ? r.layer_online : r.layer_offline)[index] += l.total();
}

void finish(FlopReport& r) {
  r.online += r.head;
  for (std::uint64_t v : r.layer_online) r.online += v;
  for (std::uint64_t v : r.layer_offline) r.offline += v;
}

}  // namespace

FlopReport flops_full(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len) {
  const std::uint64_t s = q_len + p_len + kSpecialTokens;
  FlopReport r;
  r.layer_online.assign(config.n_layers, 0);
  r.layer_offline.assign(config.n_layers, 0);
  r.embedding = embedding_flops(config, s);
  r.online = r.embedding;
  for (std::size_t l = 0; l < config.n_layers; ++l) add_layer(r, l, layer_flops(config, s), true);
  r.head = head_flops(config, s);
  finish(r);
  return r;
}

FlopReport flops_decomposed(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len, std::size_t k,
                            std::uint64_t bytes_per_scalar) {
  if (k > config.n_layers) {
    throw ParameterError("split layer " + std::to_string(k) + " exceeds n_layers " + std::to_string(config.n_layers));
  }
  const std::uint64_t s_q = q_len + 2, s_p = p_len + 1, s = s_q + s_p;
  FlopReport r;
  r.layer_online.assign(config.n_layers, 0);
  r.layer_offline.assign(config.n_layers, 0);
  const std::uint64_t q_embed = embedding_flops(config, s_q), p_embed = embedding_flops(config, s_p);
  r.embedding = q_embed + p_embed;
  r.online = q_embed;
  if (k == 0) {
    r.online += p_embed;
  } else {
    r.offline = p_embed;
    r.cache_bytes = s_p * config.hidden_dim * bytes_per_scalar;
  }
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    if (l < k) {
      add_layer(r, l, layer_flops(config, s_q), true);
      add_layer(r, l, layer_flops(config, s_p), false);
    } else {
      add_layer(r, l, layer_flops(config, s), true);
    }
  }
  r.head = head_flops(config, s);
  finish(r);
  return r;
}

std::uint64_t count_oracle(const std::function<void()>& forward) {
  FlopCounter counter;
  {
    ScopedFlopCounter scope(counter);
    forward();
  }
  return counter.total();
}

std::uint64_t memory_estimate(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len, std::size_t k,
                              MemoryMode mode, std::uint64_t bytes_per_scalar) {
  if (k > config.n_layers) throw ParameterError("split layer exceeds n_layers");
  const std::uint64_t d = config.hidden_dim, f = config.ffn_dim, h = config.n_heads;
  const std::uint64_t s = q_len + p_len + kSpecialTokens, s_q = q_len + 2;
  auto layer_bytes = [&](std::uint64_t rows) { return (rows * d + h * rows * rows + rows * f) * bytes_per_scalar; };
  std::uint64_t total = 0;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const bool lower = mode == MemoryMode::decomposed && l < k;
    total += layer_bytes(lower ? s_q : s);
  }
  return total;
}

namespace {
void check_costs(const CostParams& p) {
  if (p.b < 1.0) throw ParameterError("batch size must be at least 1");
  for (double v : {p.g_u, p.n_seq, p.t_b, p.s, p.s_u, p.r_u}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("cost parameters must be finite and non-negative");
  }
}
}  // namespace

double cost_original(const CostParams& p) {
  check_costs(p);
  return p.t_b * (p.n_seq / p.b) * (p.g_u / 3600.0);
}

CostBreakdown cost_decomposed(const CostParams& p) {
  check_costs(p);
  CostBreakdown c;
  c.gpu = p.t_b * (p.n_seq / p.b) * (p.g_u / 3600.0);
  c.reads = p.n_seq / 10000.0 * p.r_u;
  c.storage = p.s * p.s_u;
  return c;
}

}  // namespace deformer
