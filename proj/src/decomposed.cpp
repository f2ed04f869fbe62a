#include "deformer/decomposed.hpp"

#include "deformer/errors.hpp"

namespace deformer {

namespace {

SegmentBlock make_block(std::span<const TokenId> tokens, SegmentRole role, const ModelConfig& config) {
  return role == SegmentRole::question ? question_block(tokens, config) : passage_block(tokens, config);
}

// Layers 0..k of one segment with attention confined to the segment.
std::vector<Var> lower_graph(const BoundWeights& w, const SegmentBlock& block, std::size_t split_layer) {
  const AttentionMask own = AttentionMask::full(block.valid);
  std::vector<Var> layers{embed_block(w, block)};
  for (std::size_t l = 0; l < split_layer; ++l) {
    layers.push_back(attention_layer(w.layers[l], layers.back(), own, *w.config));
  }
  return layers;
}

std::vector<Var> upper_graph(const BoundWeights& w, Var joined, std::span<const std::uint8_t> valid,
                             std::size_t split_layer) {
  const AttentionMask full = AttentionMask::full(valid);
  std::vector<Var> layers{joined};
  for (std::size_t l = split_layer; l < w.config->n_layers; ++l) {
    layers.push_back(attention_layer(w.layers[l], layers.back(), full, *w.config));
  }
  return layers;
}

Tensor concat_rows(const Tensor& top, const Tensor& bottom) {
  std::vector<double> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Tensor({top.rows() + bottom.rows(), top.cols()}, std::move(data));
}

// Pair layout (validity and segment lengths) for two layer-k segments.
SegmentPair layout_of(const SegmentStates& question, const SegmentStates& passage) {
  SegmentPair pair;
  pair.valid = question.valid;
  pair.valid.insert(pair.valid.end(), passage.valid.begin(), passage.valid.end());
  pair.question_len = question.real_tokens;
  pair.passage_len = passage.real_tokens;
  pair.question_block_len = question.rows();
  return pair;
}

void check_split(const ModelConfig& config, std::size_t split_layer) {
  if (split_layer > config.n_layers) {
    throw ParameterError("split layer " + std::to_string(split_layer) + " outside [0, " +
                         std::to_string(config.n_layers) + "]");
  }
}

}  // namespace

DeformerModel transfer_weights(const EncoderWeights& full, std::size_t split_layer) {
  check_split(full.config, split_layer);
  return DeformerModel{full, split_layer};
}

SegmentStates encode_lower(std::span<const TokenId> tokens, SegmentRole role, const DeformerModel& model) {
  const SegmentBlock block = make_block(tokens, role, model.config());
  Tape tape;
  const BoundWeights w = bind_weights(tape, model.weights, false);
  const std::vector<Var> layers = lower_graph(w, block, model.split_layer);
  SegmentStates states;
  states.role = role;
  states.valid = block.valid;
  states.real_tokens = block.real_tokens;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    check_finite(layers[l].value(), "segment layer " + std::to_string(l));
    states.layers.push_back(layers[l].value());
  }
  return states;
}

SegmentStates passage_states_from_cache(const CacheEntry& entry) {
  if (entry.token_count < 2 || entry.states.rows() != entry.token_count) {
    throw FormatError("cache entry rows do not match its token count");
  }
  SegmentStates states;
  states.role = SegmentRole::passage;
  states.first_layer = entry.key.split_layer;
  states.layers = {entry.states};
  states.valid.assign(entry.token_count, 1);
  states.real_tokens = entry.token_count - 1u;
  return states;
}

HiddenStack join_and_encode_upper(const SegmentStates& question, const SegmentStates& passage,
                                  const DeformerModel& model) {
  if (question.role != SegmentRole::question || passage.role != SegmentRole::passage) {
    throw InputError("join_and_encode_upper expects (question, passage) states in that order");
  }
  const std::size_t k = model.split_layer;
  if (question.layers.empty() || passage.layers.empty() || question.top_layer() != k || passage.top_layer() != k) {
    throw StateError("both segments must be at layer " + std::to_string(k));
  }
  const std::size_t d = model.config().hidden_dim;
  if (question.top().cols() != d || passage.top().cols() != d) {
    throw ShapeError("segment hidden width does not match the model");
  }
  const SegmentPair pair = layout_of(question, passage);
  Tape tape;
  const BoundWeights w = bind_weights(tape, model.weights, false);
  const Var joined = tape.constant(concat_rows(question.top(), passage.top()));
  const std::vector<Var> layers = upper_graph(w, joined, pair.valid, k);
  HiddenStack stack;
  stack.first_layer = k;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check_finite(layers[i].value(), "layer " + std::to_string(k + i));
    stack.layers.push_back(layers[i].value());
  }
  return stack;
}

DeformerOutput deformer_forward(std::span<const TokenId> question, const PassageSource& passage,
                                const DeformerModel& model, StoragePrecision inline_storage) {
  const std::size_t k = model.split_layer;
  const SegmentStates q_states = encode_lower(question, SegmentRole::question, model);
  SegmentStates p_states;
  SegmentPair pair;
  if (const auto* tokens = std::get_if<std::vector<TokenId>>(&passage)) {
    p_states = encode_lower(*tokens, SegmentRole::passage, model);
    p_states.layers.back() = quantize(p_states.layers.back(), inline_storage);
    pair = pack_pair(question, *tokens, model.config());
  } else {
    const CacheEntry& entry = std::get<CacheEntry>(passage);
    if (entry.key.fingerprint != model.weights_fingerprint()) {
      throw CacheCompatibilityError("cache entry was produced by a different model (fingerprint mismatch)");
    }
    if (entry.key.split_layer != k) {
      throw CacheCompatibilityError("cache entry holds layer " + std::to_string(entry.key.split_layer) +
                                    " states, model splits at " + std::to_string(k));
    }
    if (entry.states.cols() != model.config().hidden_dim) {
      throw CacheCompatibilityError("cache entry width does not match the model");
    }
    p_states = passage_states_from_cache(entry);
    pair = layout_of(q_states, p_states);
    const SegmentBlock qb = question_block(question, model.config());
    pair.token_ids = qb.token_ids;
  }

  HiddenStack upper = join_and_encode_upper(q_states, p_states, model);
  DeformerOutput out;
  out.stack.first_layer = p_states.first_layer;
  for (std::size_t l = p_states.first_layer; l < k; ++l) {
    out.stack.layers.push_back(concat_rows(q_states.layers[l], p_states.layers[l]));
  }
  for (Tensor& t : upper.layers) out.stack.layers.push_back(std::move(t));

  Tape tape;
  const BoundWeights w = bind_weights(tape, model.weights, false);
  out.prediction = to_distribution(span_head(w, tape.constant(out.stack.layers.back()), pair), pair);
  out.pair = std::move(pair);
  return out;
}

HiddenStack masked_oracle(const SegmentPair& pair, const EncoderWeights& full, std::size_t split_layer) {
  check_split(full.config, split_layer);
  Tape tape;
  const BoundWeights w = bind_weights(tape, full, false);
  const std::vector<Var> layers = encode_graph(w, pair, split_layer);
  HiddenStack stack;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    check_finite(layers[l].value(), "layer " + std::to_string(l));
    stack.layers.push_back(layers[l].value());
  }
  return stack;
}

DeformerGraph deformer_graph(const BoundWeights& weights, std::span<const TokenId> question,
                             std::span<const TokenId> passage, std::size_t split_layer) {
  const ModelConfig& config = *weights.config;
  check_split(config, split_layer);
  const SegmentBlock qb = question_block(question, config);
  const SegmentBlock pb = passage_block(passage, config);
  DeformerGraph g;
  g.pair = join_blocks(qb, pb);
  g.question_lower = lower_graph(weights, qb, split_layer);
  g.passage_lower = lower_graph(weights, pb, split_layer);
  const std::vector<Var> halves{g.question_lower.back(), g.passage_lower.back()};
  g.upper = upper_graph(weights, deformer::concat_rows(halves), g.pair.valid, split_layer);
  g.probs = span_head(weights, g.upper.back(), g.pair);
  return g;
}

}  // namespace deformer
