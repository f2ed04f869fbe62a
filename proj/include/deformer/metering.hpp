#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "deformer/encoder.hpp"

namespace deformer {

// Counting convention: a multiply-add is 2 FLOPs; softmax, layer norm and GELU
// use the per-element constants in flop_counter.hpp; bias adds, residual adds
// and scaling cost 1 per element; gathers, slices and concatenations are free.
//
// Lengths: q_len is the number of question slots (q_max for a padded pair),
// p_len the number of passage tokens. A packed pair has q_len + p_len + 3 rows,
// a question block q_len + 2 and a passage block p_len + 1.

struct LayerFlops {
  std::uint64_t attention = 0;  // projections, scores, softmax, context, residual, norm
  std::uint64_t ffn = 0;        // both matmuls, biases, GELU, residual, norm
  std::uint64_t total() const { return attention + ffn; }
};

LayerFlops layer_flops(const ModelConfig& config, std::uint64_t rows);
std::uint64_t embedding_flops(const ModelConfig& config, std::uint64_t rows);
std::uint64_t head_flops(const ModelConfig& config, std::uint64_t rows);

struct FlopReport {
  std::vector<std::uint64_t> layer_online;   // per layer, per query
  std::vector<std::uint64_t> layer_offline;  // per layer, once per passage
  std::uint64_t embedding = 0;
  std::uint64_t attention = 0;
  std::uint64_t ffn = 0;
  std::uint64_t head = 0;
  std::uint64_t online = 0;
  std::uint64_t offline = 0;
  std::uint64_t cache_bytes = 0;  // c: bytes loaded per query from the passage cache
  std::uint64_t total() const { return online + offline; }
};

FlopReport flops_full(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len);
// Throws ParameterError if k > n_layers.
FlopReport flops_decomposed(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len, std::size_t k,
                            std::uint64_t bytes_per_scalar = 4);

// FLOPs recorded by tensor primitives while `forward` runs.
std::uint64_t count_oracle(const std::function<void()>& forward);

enum class MemoryMode { full, decomposed };

/// Activation bytes held for one query when every layer's activations are
/// retained: per layer, its input (s x d), attention scores (h x s x s) and
/// FFN intermediate (s x ffn). In decomposed mode the lower k layers hold the
/// question block only; the passage part arrives from the cache.
std::uint64_t memory_estimate(const ModelConfig& config, std::uint64_t q_len, std::uint64_t p_len, std::size_t k,
                              MemoryMode mode, std::uint64_t bytes_per_scalar = 4);

struct CostParams {
  double g_u = 2.48;       // accelerator $ per hour
  double n_seq = 30e6;     // sequences per month
  double b = 640;          // batch size
  double t_b = 4.6;        // seconds per batch
  double s = 226;          // cached GB
  double s_u = 0.02;       // $ per GB-month
  double r_u = 0.004;      // $ per 10,000 reads
};

struct CostBreakdown {
  double gpu = 0.0;
  double reads = 0.0;
  double storage = 0.0;
  double total() const { return gpu + reads + storage; }
};

// $ per month. Throw ParameterError on b < 1 or a negative field.
double cost_original(const CostParams& p);
CostBreakdown cost_decomposed(const CostParams& p);

}  // namespace deformer
