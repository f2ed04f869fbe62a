#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deformer/decomposed.hpp"
#include "deformer/encoder.hpp"

namespace deformer {

// Mean over vectors of (1 - cosine similarity to their elementwise mean).
// Bit-identical vectors give exactly 0. Throws InputError on fewer than two
// vectors or a zero-norm vector or centroid, ShapeError on unequal lengths.
double centroid_cosine_variance(const std::vector<std::vector<double>>& vectors);

// Min-max scaling to [0, 1]; a constant profile maps to all zeros.
std::vector<double> min_max_normalize(const std::vector<double>& values);

struct EncodedPair {
  HiddenStack stack;  // layers 0..n in packed row order
  SegmentPair pair;
};

struct ModelProbe {
  ModelConfig config;
  std::function<EncodedPair(std::span<const TokenId> question, std::span<const TokenId> passage)> encode;
};

// `weights` / `model` must outlive the probe.
ModelProbe full_probe(const EncoderWeights& weights);
ModelProbe deformer_probe(const DeformerModel& model);

struct PassageQuestions {
  std::vector<TokenId> passage;
  std::vector<std::vector<TokenId>> questions;
};

enum class VarianceMode { token, pooled };

struct VarianceProfile {
  std::vector<double> raw;         // per layer 0..n
  std::vector<double> normalized;  // min-max over layers
  std::size_t passages = 0;
  std::size_t questions = 0;
  std::size_t skipped_tokens = 0;  // degenerate centroids
};

/// For each passage and layer, the variance of the passage's representation
/// across the questions it is paired with: per passage token (or pooled over
/// the passage in pooled mode), averaged over tokens and then passages.
/// Throws InputError if a passage has fewer than two questions.
VarianceProfile passage_variance_profile(const ModelProbe& model, const std::vector<PassageQuestions>& probes,
                                         VarianceMode mode = VarianceMode::token);

enum class DistanceMetric { euclidean, cosine };

struct DivergenceProfile {
  std::vector<double> question;  // per layer 0..n, mean over non-pad question-block rows
  std::vector<double> passage;   // per layer 0..n, mean over non-pad passage-block rows
};

struct QaPairRef {
  std::vector<TokenId> question;
  std::vector<TokenId> passage;
};

/// Per-layer mean distance between corresponding token vectors of two
/// models. Throws ConfigurationError if the models differ in shape.
DivergenceProfile divergence_profile(const ModelProbe& a, const ModelProbe& b, const std::vector<QaPairRef>& sample,
                                     DistanceMetric metric = DistanceMetric::euclidean);

// One JSON object per line: layer, raw, normalized.
void write_variance_profile(const std::filesystem::path& path, const VarianceProfile& profile);
// One JSON object per line: layer, question, passage.
void write_divergence_profile(const std::filesystem::path& path, const DivergenceProfile& profile);

// Eight-level block characters, scaled between the values' min and max.
std::string sparkline(const std::vector<double>& values);

}  // namespace deformer
