#include "deformer/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "deformer/errors.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// ModelConfig
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigurationError("model config: " + msg); };
  if (hidden_dim == 0 || n_heads == 0) fail("hidden_dim and n_heads must be positive");
  if (hidden_dim % n_heads != 0) fail("hidden_dim must be divisible by n_heads");
  if (ffn_dim == 0) fail("ffn_dim must be positive");
  if (vocab_size <= kReservedTokens) fail("vocab_size must exceed the 4 reserved ids");
  if (q_max == 0 || p_max == 0) fail("q_max and p_max must be positive");
  if (q_max + p_max + kSpecialTokens > max_positions) fail("q_max + p_max + 3 exceeds max_positions");
  if (!(layer_norm_eps > 0.0)) fail("layer_norm_eps must be positive");
  if (!(init_std > 0.0)) fail("init_std must be positive");
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {
const std::vector<std::string>& reserved_tokens() {
  static const std::vector<std::string> kReserved{"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
  return kReserved;
}
}  // namespace

Vocabulary Vocabulary::build(std::span<const std::string> corpus) {
  std::set<std::string> unique(corpus.begin(), corpus.end());
  for (const auto& r : reserved_tokens()) unique.erase(r);
  std::vector<std::string> tokens = reserved_tokens();
  tokens.insert(tokens.end(), unique.begin(), unique.end());
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens_in_id_order) {
  if (tokens_in_id_order.size() < kReservedTokens ||
      !std::equal(reserved_tokens().begin(), reserved_tokens().end(), tokens_in_id_order.begin())) {
    throw FormatError("vocabulary must start with [PAD] [CLS] [SEP] [UNK]");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens_in_id_order);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    if (!v.index_.emplace(v.tokens_[i], static_cast<TokenId>(i)).second) {
      throw FormatError("vocabulary contains duplicate token '" + v.tokens_[i] + "'");
    }
  }
  return v;
}

TokenId Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<TokenId> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (TokenId id : ids) out.push_back(token(id));
  return out;
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

namespace {
void check_ids(std::span<const TokenId> ids, const ModelConfig& config, const char* what) {
  for (TokenId id : ids) {
    if (id >= config.vocab_size) {
      throw InputError(std::string(what) + " token id " + std::to_string(id) + " outside vocab_size");
    }
  }
}
}  // namespace

SegmentBlock question_block(std::span<const TokenId> question, const ModelConfig& config) {
  if (question.empty()) throw InputError("question is empty");
  if (question.size() > config.q_max) {
    throw InputError("question has " + std::to_string(question.size()) + " tokens, q_max is " +
                     std::to_string(config.q_max));
  }
  check_ids(question, config, "question");
  SegmentBlock b;
  b.role = SegmentRole::question;
  b.real_tokens = question.size();
  b.token_ids.push_back(kClsId);
  b.token_ids.insert(b.token_ids.end(), question.begin(), question.end());
  b.token_ids.resize(config.q_max + 1, kPadId);
  b.token_ids.push_back(kSepId);
  b.valid.assign(b.token_ids.size(), 1);
  for (std::size_t i = question.size() + 1; i < config.q_max + 1; ++i) b.valid[i] = 0;
  b.position_ids.resize(b.token_ids.size());
  for (std::size_t i = 0; i < b.position_ids.size(); ++i) b.position_ids[i] = i;
  return b;
}

SegmentBlock passage_block(std::span<const TokenId> passage, const ModelConfig& config, std::size_t trailing_pads) {
  if (passage.empty()) throw InputError("passage is empty");
  if (passage.size() > config.p_max) {
    throw InputError("passage has " + std::to_string(passage.size()) + " tokens, p_max is " +
                     std::to_string(config.p_max));
  }
  check_ids(passage, config, "passage");
  SegmentBlock b;
  b.role = SegmentRole::passage;
  b.real_tokens = passage.size();
  b.token_ids.assign(passage.begin(), passage.end());
  b.token_ids.push_back(kSepId);
  b.valid.assign(b.token_ids.size(), 1);
  b.token_ids.resize(b.token_ids.size() + trailing_pads, kPadId);
  b.valid.resize(b.token_ids.size(), 0);
  const std::size_t offset = config.passage_offset();
  if (offset + b.token_ids.size() > config.max_positions) {
    throw InputError("passage block with padding exceeds max_positions");
  }
  b.position_ids.resize(b.token_ids.size());
  for (std::size_t i = 0; i < b.position_ids.size(); ++i) b.position_ids[i] = offset + i;
  return b;
}

SegmentPair join_blocks(const SegmentBlock& question, const SegmentBlock& passage) {
  if (question.role != SegmentRole::question || passage.role != SegmentRole::passage) {
    throw InputError("join_blocks expects (question, passage) blocks in that order");
  }
  SegmentPair pair;
  pair.question_len = question.real_tokens;
  pair.passage_len = passage.real_tokens;
  pair.question_block_len = question.length();
  for (const SegmentBlock* b : {&question, &passage}) {
    pair.token_ids.insert(pair.token_ids.end(), b->token_ids.begin(), b->token_ids.end());
    pair.position_ids.insert(pair.position_ids.end(), b->position_ids.begin(), b->position_ids.end());
    pair.valid.insert(pair.valid.end(), b->valid.begin(), b->valid.end());
    pair.segment_ids.insert(pair.segment_ids.end(), b->length(), b->segment_id());
  }
  return pair;
}

SegmentPair pack_pair(std::span<const TokenId> question, std::span<const TokenId> passage, const ModelConfig& config,
                      std::size_t trailing_pads) {
  return join_blocks(question_block(question, config), passage_block(passage, config, trailing_pads));
}

AttentionMask AttentionMask::full(std::span<const std::uint8_t> valid) {
  AttentionMask m;
  m.size = valid.size();
  m.allow.resize(m.size * m.size);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) m.allow[i * m.size + j] = valid[j];
  }
  return m;
}

AttentionMask AttentionMask::block_diagonal(std::span<const std::uint8_t> valid, std::size_t split) {
  AttentionMask m;
  m.size = valid.size();
  m.allow.resize(m.size * m.size);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) {
      const bool same_block = (i < split) == (j < split);
      m.allow[i * m.size + j] = same_block ? valid[j] : 0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

EncoderWeights EncoderWeights::initialize(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.hidden_dim, f = config.ffn_dim;
  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, config.init_std);
  auto random = [&](std::size_t r, std::size_t c) {
    Tensor t({r, c});
    for (double& v : t.data()) v = normal(rng);
    return t;
  };
  auto zeros = [](std::size_t n) { return Tensor({n}, 0.0); };
  auto ones = [](std::size_t n) { return Tensor({n}, 1.0); };

  EncoderWeights w;
  w.config = config;
  w.token_embedding = random(config.vocab_size, d);
  w.position_embedding = random(config.max_positions, d);
  w.segment_embedding = random(2, d);
  w.embed_norm_gain = ones(d);
  w.embed_norm_bias = zeros(d);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    LayerWeights lw;
    lw.query = random(d, d);
    lw.query_bias = zeros(d);
    lw.key = random(d, d);
    lw.value = random(d, d);
    lw.value_bias = zeros(d);
    lw.output = random(d, d);
    lw.output_bias = zeros(d);
    lw.attn_norm_gain = ones(d);
    lw.attn_norm_bias = zeros(d);
    lw.ffn_in = random(d, f);
    lw.ffn_in_bias = zeros(f);
    lw.ffn_out = random(f, d);
    lw.ffn_out_bias = zeros(d);
    lw.ffn_norm_gain = ones(d);
    lw.ffn_norm_bias = zeros(d);
    w.layers.push_back(std::move(lw));
  }
  w.span_head = random(d, 2);
  return w;
}

namespace {

template <typename W, typename Fn>
void visit_parameters(W& w, Fn&& fn) {
  fn(w.token_embedding, "token_embedding");
  fn(w.position_embedding, "position_embedding");
  fn(w.segment_embedding, "segment_embedding");
  fn(w.embed_norm_gain, "embed_norm_gain");
  fn(w.embed_norm_bias, "embed_norm_bias");
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& lw = w.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    fn(lw.query, p + "query");
    fn(lw.query_bias, p + "query_bias");
    fn(lw.key, p + "key");
    fn(lw.value, p + "value");
    fn(lw.value_bias, p + "value_bias");
    fn(lw.output, p + "output");
    fn(lw.output_bias, p + "output_bias");
    fn(lw.attn_norm_gain, p + "attn_norm_gain");
    fn(lw.attn_norm_bias, p + "attn_norm_bias");
    fn(lw.ffn_in, p + "ffn_in");
    fn(lw.ffn_in_bias, p + "ffn_in_bias");
    fn(lw.ffn_out, p + "ffn_out");
    fn(lw.ffn_out_bias, p + "ffn_out_bias");
    fn(lw.ffn_norm_gain, p + "ffn_norm_gain");
    fn(lw.ffn_norm_bias, p + "ffn_norm_bias");
  }
  fn(w.span_head, "span_head");
}

}  // namespace

std::vector<Tensor*> EncoderWeights::parameters() {
  std::vector<Tensor*> out;
  visit_parameters(*this, [&](Tensor& t, const std::string&) { out.push_back(&t); });
  return out;
}

std::vector<const Tensor*> EncoderWeights::parameters() const {
  std::vector<const Tensor*> out;
  visit_parameters(*this, [&](const Tensor& t, const std::string&) { out.push_back(&t); });
  return out;
}

std::vector<std::string> EncoderWeights::parameter_names() const {
  std::vector<std::string> out;
  visit_parameters(*this, [&](const Tensor&, const std::string& name) { out.push_back(name); });
  return out;
}

std::size_t EncoderWeights::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

Fingerprint EncoderWeights::fingerprint() const {
  Sha256 h;
  h.update_string("deformer-encoder-v1");
  for (std::size_t v : {config.n_layers, config.hidden_dim, config.n_heads, config.ffn_dim, config.vocab_size,
                        config.max_positions, config.q_max, config.p_max}) {
    h.update_u64(v);
  }
  h.update_f64(config.layer_norm_eps);
  h.update_f64(config.init_std);
  h.update_u64(config.seed);
  for (const Tensor* t : parameters()) {
    h.update_u64(t->rank());
    for (std::size_t dim : t->shape()) h.update_u64(dim);
    for (double v : t->data()) h.update_f32(static_cast<float>(v));
  }
  return h.finish();
}

void EncoderWeights::round_to_f32() {
  for (Tensor* t : parameters()) *t = t->rounded_to_f32();
}

void EncoderWeights::validate_shapes() const {
  config.validate();
  const EncoderWeights reference = [&] {
    ModelConfig c = config;
    return EncoderWeights::initialize(c);
  }();
  const auto mine = parameters();
  const auto theirs = reference.parameters();
  const auto names = parameter_names();
  if (mine.size() != theirs.size()) throw ConfigurationError("parameter count does not match config");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (!mine[i]->same_shape(*theirs[i])) {
      throw ConfigurationError("parameter " + names[i] + " has shape " + mine[i]->shape_string() + ", expected " +
                               theirs[i]->shape_string());
    }
  }
}

const Tensor& HiddenStack::layer(std::size_t l) const {
  if (l < first_layer || l > last_layer()) {
    throw StateError("hidden stack holds layers " + std::to_string(first_layer) + ".." +
                     std::to_string(last_layer()) + ", layer " + std::to_string(l) + " requested");
  }
  return layers[l - first_layer];
}

PredictionDistribution PredictionDistribution::over_passage(std::vector<double> start, std::vector<double> end) {
  if (start.size() != end.size()) throw ShapeError("start/end distributions differ in length");
  PredictionDistribution d;
  d.passage_len = start.size();
  d.start = std::move(start);
  d.end = std::move(end);
  return d;
}

// ---------------------------------------------------------------------------
// Graph construction
// ---------------------------------------------------------------------------

BoundWeights bind_vars(const ModelConfig& config, std::span<const Var> vars) {
  const std::size_t expected = 6 + 15 * config.n_layers;
  if (vars.size() != expected) {
    throw ShapeError("expected " + std::to_string(expected) + " parameter vars, got " + std::to_string(vars.size()));
  }
  BoundWeights b;
  b.config = &config;
  b.all.assign(vars.begin(), vars.end());
  std::size_t i = 0;
  b.token_embedding = vars[i++];
  b.position_embedding = vars[i++];
  b.segment_embedding = vars[i++];
  b.embed_norm_gain = vars[i++];
  b.embed_norm_bias = vars[i++];
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BoundLayer bl;
    for (Var* slot : {&bl.query, &bl.query_bias, &bl.key, &bl.value, &bl.value_bias, &bl.output, &bl.output_bias,
                      &bl.attn_norm_gain, &bl.attn_norm_bias, &bl.ffn_in, &bl.ffn_in_bias, &bl.ffn_out,
                      &bl.ffn_out_bias, &bl.ffn_norm_gain, &bl.ffn_norm_bias}) {
      *slot = vars[i++];
    }
    b.layers.push_back(bl);
  }
  b.span_head = vars[i++];
  return b;
}

BoundWeights bind_weights(Tape& tape, const EncoderWeights& weights, bool trainable) {
  std::vector<Var> vars;
  for (const Tensor* t : weights.parameters()) vars.push_back(trainable ? tape.parameter(*t) : tape.constant(*t));
  return bind_vars(weights.config, vars);
}

Var embed_tokens(const BoundWeights& w, std::span<const TokenId> token_ids, std::span<const std::size_t> position_ids,
                 std::span<const std::size_t> segment_ids) {
  const Var tok = gather_rows(w.token_embedding, {token_ids.begin(), token_ids.end()});
  const Var pos = gather_rows(w.position_embedding, {position_ids.begin(), position_ids.end()});
  const Var seg = gather_rows(w.segment_embedding, {segment_ids.begin(), segment_ids.end()});
  return layer_norm(add(add(tok, pos), seg), w.embed_norm_gain, w.embed_norm_bias, w.config->layer_norm_eps);
}

Var embed_block(const BoundWeights& w, const SegmentBlock& block) {
  const std::vector<std::size_t> segments(block.length(), block.segment_id());
  return embed_tokens(w, block.token_ids, block.position_ids, segments);
}

Var embed_pair(const BoundWeights& w, const SegmentPair& pair) {
  return embed_tokens(w, pair.token_ids, pair.position_ids, pair.segment_ids);
}

Var attention_layer(const BoundLayer& layer, Var x, const AttentionMask& mask, const ModelConfig& config) {
  const std::size_t s = x.value().rows();
  if (mask.size != s || mask.allow.size() != s * s) {
    throw ShapeError("attention mask is " + std::to_string(mask.size) + "^2, sequence has " + std::to_string(s) +
                     " rows");
  }
  for (std::size_t i = 0; i < s; ++i) {
    const auto row = mask.allow.begin() + static_cast<std::ptrdiff_t>(i * s);
    if (std::none_of(row, row + static_cast<std::ptrdiff_t>(s), [](std::uint8_t a) { return a != 0; })) {
      throw InputError("attention mask row " + std::to_string(i) + " allows no key");
    }
  }
  const std::size_t heads = config.n_heads, dh = config.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const Var q = add_bias(matmul(x, layer.query), layer.query_bias);
  const Var k = matmul(x, layer.key);
  const Var v = add_bias(matmul(x, layer.value), layer.value_bias);
  std::vector<Var> contexts;
  contexts.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Var qh = slice_cols(q, h * dh, dh);
    const Var kh = slice_cols(k, h * dh, dh);
    const Var vh = slice_cols(v, h * dh, dh);
    const Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
    const Var probs = softmax(scores, 1, &mask.allow);
    contexts.push_back(matmul(probs, vh));
  }
  const Var context = heads == 1 ? contexts.front() : concat_cols(contexts);
  const Var attended = add_bias(matmul(context, layer.output), layer.output_bias);
  const double eps = config.layer_norm_eps;
  const Var x1 = layer_norm(add(x, attended), layer.attn_norm_gain, layer.attn_norm_bias, eps);
  const Var hidden = gelu(add_bias(matmul(x1, layer.ffn_in), layer.ffn_in_bias));
  const Var ffn = add_bias(matmul(hidden, layer.ffn_out), layer.ffn_out_bias);
  return layer_norm(add(x1, ffn), layer.ffn_norm_gain, layer.ffn_norm_bias, eps);
}

SpanProbabilities span_head(const BoundWeights& w, Var top, const SegmentPair& pair) {
  if (pair.passage_len == 0) throw InputError("span head needs at least one valid passage slot");
  const std::size_t s = pair.length();
  if (top.value().rows() != s) throw ShapeError("span head input rows do not match the packed pair");
  ElementMask passage_slots(s, 0);
  for (std::size_t i = 0; i < s; ++i) passage_slots[i] = pair.is_passage_slot(i) ? 1 : 0;
  const Var logits = matmul(top, w.span_head);
  return {softmax(slice_cols(logits, 0, 1), 0, &passage_slots), softmax(slice_cols(logits, 1, 1), 0, &passage_slots)};
}

std::vector<Var> encode_graph(const BoundWeights& w, const SegmentPair& pair, std::size_t decomposed_layers) {
  const ModelConfig& config = *w.config;
  if (decomposed_layers > config.n_layers) throw ParameterError("decomposed layer count exceeds n_layers");
  const AttentionMask full = AttentionMask::full(pair.valid);
  const AttentionMask local =
      decomposed_layers > 0 ? AttentionMask::block_diagonal(pair.valid, pair.question_block_len) : AttentionMask{};
  std::vector<Var> stack{embed_pair(w, pair)};
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    const AttentionMask& mask = l < decomposed_layers ? local : full;
    stack.push_back(attention_layer(w.layers[l], stack.back(), mask, config));
  }
  return stack;
}

// ---------------------------------------------------------------------------
// Value-level operations
// ---------------------------------------------------------------------------

void check_finite(const Tensor& t, const std::string& what) {
  if (!t.all_finite()) throw NumericalError("non-finite activation in " + what);
}

HiddenStack encode_full(const SegmentPair& pair, const EncoderWeights& weights) {
  Tape tape;
  const BoundWeights w = bind_weights(tape, weights, false);
  const std::vector<Var> layers = encode_graph(w, pair);
  HiddenStack stack;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    check_finite(layers[l].value(), "layer " + std::to_string(l));
    stack.layers.push_back(layers[l].value());
  }
  return stack;
}

Tensor attention_layer(const Tensor& x, const AttentionMask& mask, const LayerWeights& layer,
                       const ModelConfig& config) {
  Tape tape;
  BoundLayer bl;
  bl.query = tape.constant(layer.query);
  bl.query_bias = tape.constant(layer.query_bias);
  bl.key = tape.constant(layer.key);
  bl.value = tape.constant(layer.value);
  bl.value_bias = tape.constant(layer.value_bias);
  bl.output = tape.constant(layer.output);
  bl.output_bias = tape.constant(layer.output_bias);
  bl.attn_norm_gain = tape.constant(layer.attn_norm_gain);
  bl.attn_norm_bias = tape.constant(layer.attn_norm_bias);
  bl.ffn_in = tape.constant(layer.ffn_in);
  bl.ffn_in_bias = tape.constant(layer.ffn_in_bias);
  bl.ffn_out = tape.constant(layer.ffn_out);
  bl.ffn_out_bias = tape.constant(layer.ffn_out_bias);
  bl.ffn_norm_gain = tape.constant(layer.ffn_norm_gain);
  bl.ffn_norm_bias = tape.constant(layer.ffn_norm_bias);
  return attention_layer(bl, tape.constant(x), mask, config).value();
}

PredictionDistribution to_distribution(const SpanProbabilities& probs, const SegmentPair& pair) {
  PredictionDistribution d;
  d.start = probs.start.value().values();
  d.end = probs.end.value().values();
  d.passage_offset = pair.passage_offset();
  d.passage_len = pair.passage_len;
  return d;
}

PredictionDistribution qa_head(const HiddenStack& stack, const SegmentPair& pair, const EncoderWeights& weights) {
  if (stack.last_layer() != weights.config.n_layers) throw StateError("qa_head needs the complete hidden stack");
  Tape tape;
  const BoundWeights w = bind_weights(tape, weights, false);
  return to_distribution(span_head(w, tape.constant(stack.layers.back()), pair), pair);
}

Span predict_span(const PredictionDistribution& dist, std::size_t max_span_len) {
  if (max_span_len == 0) throw ParameterError("max_span_len must be at least 1");
  if (dist.passage_len == 0) throw InputError("distribution has no passage slots");
  const std::size_t off = dist.passage_offset, n = dist.passage_len;
  Span best;
  double best_score = -1.0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t last = std::min(n - 1, s + max_span_len - 1);
    for (std::size_t e = s; e <= last; ++e) {
      const double score = dist.start[off + s] * dist.end[off + e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

}  // namespace deformer
