#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deformer/autodiff.hpp"
#include "deformer/fingerprint.hpp"
#include "deformer/tensor.hpp"

namespace deformer {

using TokenId = std::uint32_t;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kClsId = 1;
inline constexpr TokenId kSepId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kReservedTokens = 4;
// [CLS] and the first [SEP] close the question block, the last [SEP] closes the passage.
inline constexpr std::size_t kSpecialTokens = 3;

struct ModelConfig {
  std::size_t n_layers = 2;
  std::size_t hidden_dim = 16;
  std::size_t n_heads = 2;
  std::size_t ffn_dim = 32;
  std::size_t vocab_size = 32;
  std::size_t max_positions = 64;
  std::size_t q_max = 4;
  std::size_t p_max = 24;
  double layer_norm_eps = 1e-12;
  // Standard deviation of the normal initialiser for matrices and embeddings.
  double init_std = 0.02;
  std::uint64_t seed = 1;

  // Throws ConfigurationError on a violated invariant.
  void validate() const;
  std::size_t head_dim() const { return hidden_dim / n_heads; }
  std::size_t question_block_len() const { return q_max + 2; }
  std::size_t passage_offset() const { return q_max + 2; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Whitespace-token vocabulary with ids 0..3 reserved for [PAD] [CLS] [SEP] [UNK].
class Vocabulary {
 public:
  // Sorted unique tokens receive ids starting at 4.
  static Vocabulary build(std::span<const std::string> corpus);
  static Vocabulary from_tokens(std::vector<std::string> tokens_in_id_order);

  TokenId id(const std::string& token) const;  // [UNK] when absent
  bool contains(const std::string& token) const { return index_.contains(token); }
  const std::string& token(TokenId id) const;
  std::vector<TokenId> encode(std::span<const std::string> tokens) const;
  std::vector<std::string> decode(std::span<const TokenId> ids) const;
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

enum class SegmentRole : std::uint8_t { question = 0, passage = 1 };

/// One segment laid out exactly as it appears inside a packed pair.
///
/// The question block is [CLS] q_1..q_q [PAD]* [SEP] with q_max + 2 slots and
/// positions 0..q_max+1. The passage block is p_1..p_p [SEP] [PAD]* with
/// positions starting at q_max + 2, so its layout never depends on the question.
struct SegmentBlock {
  SegmentRole role = SegmentRole::question;
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> position_ids;
  std::vector<std::uint8_t> valid;  // 0 for padding
  std::size_t real_tokens = 0;      // question/passage tokens, excluding specials and padding

  std::size_t length() const { return token_ids.size(); }
  std::size_t segment_id() const { return static_cast<std::size_t>(role); }
};

SegmentBlock question_block(std::span<const TokenId> question, const ModelConfig& config);
// `trailing_pads` extra [PAD] slots follow the closing [SEP].
SegmentBlock passage_block(std::span<const TokenId> passage, const ModelConfig& config,
                           std::size_t trailing_pads = 0);

/// Packed (question, passage) input: [CLS] question [PAD]* [SEP] passage [SEP] [PAD]*.
struct SegmentPair {
  std::vector<TokenId> token_ids;
  std::vector<std::size_t> position_ids;
  std::vector<std::size_t> segment_ids;
  std::vector<std::uint8_t> valid;
  std::size_t question_len = 0;
  std::size_t passage_len = 0;
  std::size_t question_block_len = 0;  // q_max + 2; the passage starts here

  // token_ids/position_ids/segment_ids are empty when the passage part was
  // served from a cache; valid always covers every row.
  std::size_t length() const { return valid.size(); }
  std::size_t passage_offset() const { return question_block_len; }
  bool is_passage_slot(std::size_t i) const {
    return i >= question_block_len && i < question_block_len + passage_len;
  }
};

SegmentPair pack_pair(std::span<const TokenId> question, std::span<const TokenId> passage,
                      const ModelConfig& config, std::size_t trailing_pads = 0);
SegmentPair join_blocks(const SegmentBlock& question, const SegmentBlock& passage);

/// Square self-attention mask; allow[i * size + j] lets query i read key j.
struct AttentionMask {
  std::size_t size = 0;
  ElementMask allow;

  // Every query may read every valid key.
  static AttentionMask full(std::span<const std::uint8_t> valid);
  // Queries before `split` read only valid keys before `split`, and likewise after.
  static AttentionMask block_diagonal(std::span<const std::uint8_t> valid, std::size_t split);
};

struct LayerWeights {
  Tensor query, query_bias;
  Tensor key;  // no bias: a key bias shifts every score in a row equally
  Tensor value, value_bias;
  Tensor output, output_bias;
  Tensor attn_norm_gain, attn_norm_bias;
  Tensor ffn_in, ffn_in_bias;
  Tensor ffn_out, ffn_out_bias;
  Tensor ffn_norm_gain, ffn_norm_bias;
};

/// All learnable parameters of an n-layer encoder with a span head.
struct EncoderWeights {
  ModelConfig config;
  Tensor token_embedding;     // vocab x d
  Tensor position_embedding;  // max_positions x d
  Tensor segment_embedding;   // 2 x d
  Tensor embed_norm_gain, embed_norm_bias;
  std::vector<LayerWeights> layers;
  Tensor span_head;  // d x 2: start and end logits

  // Seeded N(0, init_std) matrices, zero biases, unit norm gains.
  static EncoderWeights initialize(const ModelConfig& config);

  // Fixed parameter order shared by checkpoints, fingerprints and optimisers.
  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  // SHA-256 over the config fields and every parameter rounded to f32.
  Fingerprint fingerprint() const;
  void round_to_f32();
  // Throws ConfigurationError if any shape disagrees with `config`.
  void validate_shapes() const;
};

/// Per-layer token representations X^first_layer .. X^n.
struct HiddenStack {
  std::size_t first_layer = 0;
  std::vector<Tensor> layers;

  std::size_t last_layer() const { return first_layer + layers.size() - 1; }
  const Tensor& layer(std::size_t l) const;
};

/// Start and end distributions over the packed sequence; zero off the passage.
struct PredictionDistribution {
  std::vector<double> start;
  std::vector<double> end;
  std::size_t passage_offset = 0;
  std::size_t passage_len = 0;

  // Distribution whose every slot is a passage slot.
  static PredictionDistribution over_passage(std::vector<double> start, std::vector<double> end);
};

struct Span {
  std::size_t start = 0;  // passage-relative, inclusive
  std::size_t end = 0;    // passage-relative, inclusive
  friend bool operator==(const Span&, const Span&) = default;
};

// ---------------------------------------------------------------------------
// Graph construction (shared by inference, training and the decomposed model)
// ---------------------------------------------------------------------------

struct BoundLayer {
  Var query, query_bias, key, value, value_bias, output, output_bias;
  Var attn_norm_gain, attn_norm_bias, ffn_in, ffn_in_bias, ffn_out, ffn_out_bias;
  Var ffn_norm_gain, ffn_norm_bias;
};

/// EncoderWeights recorded as leaves on a tape.
struct BoundWeights {
  const ModelConfig* config = nullptr;
  Var token_embedding, position_embedding, segment_embedding, embed_norm_gain, embed_norm_bias;
  std::vector<BoundLayer> layers;
  Var span_head;
  std::vector<Var> all;  // same order as EncoderWeights::parameters()
};

BoundWeights bind_weights(Tape& tape, const EncoderWeights& weights, bool trainable);
// Vars in EncoderWeights::parameters() order; `config` must outlive the result.
BoundWeights bind_vars(const ModelConfig& config, std::span<const Var> vars);

Var embed_tokens(const BoundWeights& w, std::span<const TokenId> token_ids,
                 std::span<const std::size_t> position_ids, std::span<const std::size_t> segment_ids);
Var embed_block(const BoundWeights& w, const SegmentBlock& block);
Var embed_pair(const BoundWeights& w, const SegmentPair& pair);

// Multi-head self-attention + FFN, post-norm residuals. Throws InputError if a
// query row of `mask` allows no key.
Var attention_layer(const BoundLayer& layer, Var x, const AttentionMask& mask, const ModelConfig& config);

struct SpanProbabilities {
  Var start;  // length x 1
  Var end;
};
SpanProbabilities span_head(const BoundWeights& w, Var top, const SegmentPair& pair);

// Joint stack with the first `decomposed_layers` layers restricted to a
// block-diagonal mask; 0 gives the plain full encoder.
std::vector<Var> encode_graph(const BoundWeights& w, const SegmentPair& pair, std::size_t decomposed_layers = 0);

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

/// X^{l+1} = L_{l+1}(X^l) over the packed pair with full attention.
/// Throws NumericalError naming the layer if an activation becomes non-finite.
HiddenStack encode_full(const SegmentPair& pair, const EncoderWeights& weights);

Tensor attention_layer(const Tensor& x, const AttentionMask& mask, const LayerWeights& layer,
                       const ModelConfig& config);

PredictionDistribution qa_head(const HiddenStack& stack, const SegmentPair& pair, const EncoderWeights& weights);
PredictionDistribution to_distribution(const SpanProbabilities& probs, const SegmentPair& pair);

/// argmax over s <= e < s + max_span_len of start[s] * end[e], passage slots
/// only; ties go to the smallest s, then the smallest e.
Span predict_span(const PredictionDistribution& dist, std::size_t max_span_len);

void check_finite(const Tensor& t, const std::string& what);

}  // namespace deformer
