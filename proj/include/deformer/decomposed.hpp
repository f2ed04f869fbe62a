#pragma once

#include <cstddef>
#include <span>
#include <variant>
#include <vector>

#include "deformer/cache_entry.hpp"
#include "deformer/encoder.hpp"

namespace deformer {

/// Encoder whose first `split_layer` layers see one segment at a time.
/// Shares the full model's parameter structure exactly.
struct DeformerModel {
  EncoderWeights weights;
  std::size_t split_layer = 0;

  const ModelConfig& config() const { return weights.config; }
  // (weights fingerprint, k); caches are keyed on both.
  Fingerprint weights_fingerprint() const { return weights.fingerprint(); }
};

// Copies every parameter verbatim. Throws ParameterError if k > n.
DeformerModel transfer_weights(const EncoderWeights& full, std::size_t split_layer);

/// Representations of one segment for layers first_layer..k, rows laid out as
/// in the packed pair.
struct SegmentStates {
  SegmentRole role = SegmentRole::question;
  std::size_t first_layer = 0;
  std::vector<Tensor> layers;
  std::vector<std::uint8_t> valid;
  std::size_t real_tokens = 0;

  std::size_t top_layer() const { return first_layer + layers.size() - 1; }
  const Tensor& top() const { return layers.back(); }
  std::size_t rows() const { return valid.size(); }
};

SegmentStates encode_lower(std::span<const TokenId> tokens, SegmentRole role, const DeformerModel& model);

// Layer-k passage states reconstructed from a cache entry.
SegmentStates passage_states_from_cache(const CacheEntry& entry);

/// Concatenates the two layer-k segments in packed order and runs layers
/// k+1..n jointly. Returns layers k..n. Throws InputError on swapped roles,
/// StateError if either side is not at layer k, ShapeError on width mismatch.
HiddenStack join_and_encode_upper(const SegmentStates& question, const SegmentStates& passage,
                                  const DeformerModel& model);

using PassageSource = std::variant<std::vector<TokenId>, CacheEntry>;

struct DeformerOutput {
  PredictionDistribution prediction;
  // Layers 0..n for an inline passage, k..n when the passage came from a cache.
  HiddenStack stack;
  SegmentPair pair;
};

/// Question + passage (inline tokens or cached layer-k states) to a span
/// distribution. Inline passages are quantised with `inline_storage` at layer
/// k so that they match a cache written at that precision bit for bit.
/// Throws CacheCompatibilityError when a cache entry's fingerprint or k
/// disagrees with the model.
DeformerOutput deformer_forward(std::span<const TokenId> question, const PassageSource& passage,
                                const DeformerModel& model,
                                StoragePrecision inline_storage = StoragePrecision::exact);

/// Full encoder with a block-diagonal (question|passage) mask on layers 1..k
/// and the full mask above. Independent route to the decomposed result.
HiddenStack masked_oracle(const SegmentPair& pair, const EncoderWeights& full, std::size_t split_layer);

// ---------------------------------------------------------------------------
// Differentiable decomposed forward for fine-tuning.
// ---------------------------------------------------------------------------

struct DeformerGraph {
  SegmentPair pair;
  // Joint layers k..n; index 0 is the concatenated layer-k states.
  std::vector<Var> upper;
  std::vector<Var> question_lower;  // layers 0..k
  std::vector<Var> passage_lower;   // layers 0..k
  SpanProbabilities probs;
};

DeformerGraph deformer_graph(const BoundWeights& weights, std::span<const TokenId> question,
                             std::span<const TokenId> passage, std::size_t split_layer);

}  // namespace deformer
