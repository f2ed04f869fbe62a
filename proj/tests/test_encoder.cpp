#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "deformer/checkpoint.hpp"
#include "deformer/encoder.hpp"
#include "deformer/errors.hpp"
#include "test_support.hpp"

using namespace deformer;
using deformer::testing::random_tokens;
using deformer::testing::random_weights;
using deformer::testing::tiny_config;

namespace {

using Matrix = std::vector<std::vector<double>>;

Matrix to_matrix(const Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t(r, c);
  return m;
}

Matrix mm(const Matrix& a, const Matrix& b) {
  Matrix out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

void add_row(Matrix& m, const Tensor& bias) {
  for (auto& row : m)
    for (std::size_t j = 0; j < row.size(); ++j) row[j] += bias[j];
}

Matrix norm_rows(const Matrix& x, const Tensor& gain, const Tensor& bias, double eps) {
  Matrix out = x;
  for (auto& row : out) {
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
  }
  return out;
}

double gelu_ref(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

// Straight-line forward pass, no tape, no shared helpers.
std::vector<Matrix> reference_forward(const SegmentPair& pair, const EncoderWeights& w) {
  const ModelConfig& c = w.config;
  const std::size_t s = pair.length(), d = c.hidden_dim, dh = c.head_dim();
  Matrix x(s, std::vector<double>(d));
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j)
      x[i][j] = w.token_embedding(pair.token_ids[i], j) + w.position_embedding(pair.position_ids[i], j) +
                w.segment_embedding(pair.segment_ids[i], j);
  x = norm_rows(x, w.embed_norm_gain, w.embed_norm_bias, c.layer_norm_eps);
  std::vector<Matrix> stack{x};
  for (const LayerWeights& lw : w.layers) {
    Matrix q = mm(x, to_matrix(lw.query));
    add_row(q, lw.query_bias);
    const Matrix k = mm(x, to_matrix(lw.key));
    Matrix v = mm(x, to_matrix(lw.value));
    add_row(v, lw.value_bias);
    Matrix ctx(s, std::vector<double>(d, 0.0));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
      for (std::size_t i = 0; i < s; ++i) {
        std::vector<double> score(s, -INFINITY);
        double top = -INFINITY;
        for (std::size_t j = 0; j < s; ++j) {
          if (!pair.valid[j]) continue;
          double dot = 0.0;
          for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
          score[j] = dot / std::sqrt(static_cast<double>(dh));
          top = std::max(top, score[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < s; ++j) z += pair.valid[j] ? std::exp(score[j] - top) : 0.0;
        for (std::size_t j = 0; j < s; ++j) {
          if (!pair.valid[j]) continue;
          const double p = std::exp(score[j] - top) / z;
          for (std::size_t e = 0; e < dh; ++e) ctx[i][h * dh + e] += p * v[j][h * dh + e];
        }
      }
    }
    Matrix att = mm(ctx, to_matrix(lw.output));
    add_row(att, lw.output_bias);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < d; ++j) att[i][j] += x[i][j];
    const Matrix x1 = norm_rows(att, lw.attn_norm_gain, lw.attn_norm_bias, c.layer_norm_eps);
    Matrix hid = mm(x1, to_matrix(lw.ffn_in));
    add_row(hid, lw.ffn_in_bias);
    for (auto& row : hid)
      for (double& h : row) h = gelu_ref(h);
    Matrix f = mm(hid, to_matrix(lw.ffn_out));
    add_row(f, lw.ffn_out_bias);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < d; ++j) f[i][j] += x1[i][j];
    x = norm_rows(f, lw.ffn_norm_gain, lw.ffn_norm_bias, c.layer_norm_eps);
    stack.push_back(x);
  }
  return stack;
}

double max_diff(const Tensor& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a(r, c) - b[r][c]));
  return m;
}

double max_diff_rows(const Tensor& a, const Tensor& b, std::size_t rows) {
  double m = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) m = std::max(m, std::abs(a(r, c) - b(r, c)));
  return m;
}

PredictionDistribution masked_uniform(std::size_t offset, std::size_t len, std::size_t total) {
  PredictionDistribution d;
  d.start.assign(total, 0.0);
  d.end.assign(total, 0.0);
  d.passage_offset = offset;
  d.passage_len = len;
  return d;
}

Span brute_force_span(const PredictionDistribution& d, std::size_t max_len) {
  Span best;
  double best_score = -1.0;
  for (std::size_t s = 0; s < d.passage_len; ++s)
    for (std::size_t e = 0; e < d.passage_len; ++e) {
      if (e < s || e >= s + max_len) continue;
      const double score = d.start[d.passage_offset + s] * d.end[d.passage_offset + e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  return best;
}

}  // namespace

TEST(Vocabulary, SortsAfterReservedIds) {
  const std::vector<std::string> corpus{"b", "a"};
  const Vocabulary v = Vocabulary::build(corpus);
  EXPECT_EQ(v.id("[PAD]"), 0u);
  EXPECT_EQ(v.id("[CLS]"), 1u);
  EXPECT_EQ(v.id("[SEP]"), 2u);
  EXPECT_EQ(v.id("[UNK]"), 3u);
  EXPECT_EQ(v.id("a"), 4u);
  EXPECT_EQ(v.id("b"), 5u);
  EXPECT_EQ(v.size(), 6u);
}

TEST(Vocabulary, RepeatedTokensShareOneId) {
  const std::vector<std::string> corpus{"x", "y", "x", "x"};
  const Vocabulary v = Vocabulary::build(corpus);
  EXPECT_EQ(v.size(), 6u);
  EXPECT_EQ(v.id("x"), 4u);
  EXPECT_EQ(v.id("unseen"), kUnkId);
}

TEST(Vocabulary, EncodeDecodeRoundTripOverRandomCorpora) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> letter('a', 'z'), len(1, 4), count(1, 40);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> corpus(static_cast<std::size_t>(count(rng)));
    for (std::string& w : corpus) {
      const int n = len(rng);
      for (int i = 0; i < n; ++i) w.push_back(static_cast<char>(letter(rng)));
    }
    const Vocabulary v = Vocabulary::build(corpus);
    std::vector<std::string> seq;
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    for (int i = 0; i < 15; ++i) seq.push_back(corpus[pick(rng)]);
    EXPECT_EQ(v.decode(v.encode(seq)), seq);
  }
}

TEST(Vocabulary, FromTokensRejectsWrongReservedPrefix) {
  EXPECT_THROW(Vocabulary::from_tokens({"a", "b"}), FormatError);
  const Vocabulary v = Vocabulary::from_tokens({"[PAD]", "[CLS]", "[SEP]", "[UNK]", "k1"});
  EXPECT_EQ(v.id("k1"), 4u);
  EXPECT_THROW((void)v.token(99), InputError);
}

TEST(PackPair, QuestionPaddedToSlotAndPassageAtStablePosition) {
  ModelConfig c = tiny_config(1, 8, 2);
  const std::vector<TokenId> q{5, 6};
  const std::vector<TokenId> p{7, 8, 9};
  const SegmentPair pair = pack_pair(q, p, c);
  const std::vector<TokenId> ids{kClsId, 5, 6, kPadId, kPadId, kSepId, 7, 8, 9, kSepId};
  EXPECT_EQ(pair.token_ids, ids);
  const std::vector<std::uint8_t> valid{1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  EXPECT_EQ(pair.valid, valid);
  EXPECT_EQ(pair.position_ids[6], 6u);
  EXPECT_EQ(pair.passage_offset(), 6u);
  const std::vector<std::size_t> seg{0, 0, 0, 0, 0, 0, 1, 1, 1, 1};
  EXPECT_EQ(pair.segment_ids, seg);
  EXPECT_EQ(pair.question_len, 2u);
  EXPECT_EQ(pair.passage_len, 3u);
}

TEST(PackPair, EmptyQuestionRejected) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const std::vector<TokenId> p{7};
  EXPECT_THROW(pack_pair({}, p, c), InputError);
  EXPECT_THROW(pack_pair(p, {}, c), InputError);
}

TEST(PackPair, OverLengthSegmentsRejectedWithoutTruncation) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const std::vector<TokenId> long_q(c.q_max + 1, 5);
  const std::vector<TokenId> long_p(c.p_max + 1, 5);
  const std::vector<TokenId> ok{5};
  EXPECT_THROW(pack_pair(long_q, ok, c), InputError);
  EXPECT_THROW(pack_pair(ok, long_p, c), InputError);
  const std::vector<TokenId> bad_id{static_cast<TokenId>(c.vocab_size)};
  EXPECT_THROW(pack_pair(bad_id, ok, c), InputError);
}

TEST(PackPair, PassageLayoutIdenticalAcrossRandomQuestions) {
  const ModelConfig c = tiny_config(1, 8, 2);
  std::mt19937_64 rng(3);
  const std::vector<TokenId> p = random_tokens(rng, 5, 5, c);
  const SegmentPair first = pack_pair(random_tokens(rng, 1, c.q_max, c), p, c);
  for (int i = 0; i < 10; ++i) {
    const SegmentPair other = pack_pair(random_tokens(rng, 1, c.q_max, c), p, c);
    ASSERT_EQ(other.length(), first.length());
    for (std::size_t s = first.passage_offset(); s < first.length(); ++s) {
      EXPECT_EQ(other.position_ids[s], first.position_ids[s]);
      EXPECT_EQ(other.token_ids[s], first.token_ids[s]);
      EXPECT_EQ(other.segment_ids[s], first.segment_ids[s]);
    }
  }
}

TEST(ModelConfig, ValidateRejectsInconsistentConfigs) {
  ModelConfig c = tiny_config(1, 8, 3);
  EXPECT_THROW(c.validate(), ConfigurationError);
  c = tiny_config(1, 8, 2);
  c.max_positions = c.q_max + c.p_max + 2;
  EXPECT_THROW(c.validate(), ConfigurationError);
}

TEST(EncodeFull, ZeroLayersGivesEmbeddingsOnly) {
  const ModelConfig c = tiny_config(0, 8, 2);
  const EncoderWeights w = random_weights(c);
  const std::vector<TokenId> q{5, 6}, p{7, 8, 9};
  const SegmentPair pair = pack_pair(q, p, c);
  const HiddenStack stack = encode_full(pair, w);
  ASSERT_EQ(stack.layers.size(), 1u);
  EXPECT_LT(max_diff(stack.layers[0], reference_forward(pair, w)[0]), 1e-12);
}

TEST(EncodeFull, MatchesStraightLineReference) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const EncoderWeights w = random_weights(c);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const SegmentPair pair = pack_pair(random_tokens(rng, 1, c.q_max, c), random_tokens(rng, 1, c.p_max, c), c, 2);
    const HiddenStack stack = encode_full(pair, w);
    const std::vector<Matrix> ref = reference_forward(pair, w);
    ASSERT_EQ(stack.layers.size(), c.n_layers + 1);
    for (std::size_t l = 0; l <= c.n_layers; ++l) EXPECT_LT(max_diff(stack.layers[l], ref[l]), 1e-10) << "layer " << l;
  }
}

TEST(EncodeFull, TrailingPadsLeaveRealTokensUnchanged) {
  const ModelConfig c = tiny_config(3, 8, 2);
  const EncoderWeights w = random_weights(c);
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<TokenId> q = random_tokens(rng, 1, c.q_max, c), p = random_tokens(rng, 1, 6, c);
    const SegmentPair plain = pack_pair(q, p, c);
    const SegmentPair padded = pack_pair(q, p, c, 4);
    const HiddenStack a = encode_full(plain, w), b = encode_full(padded, w);
    for (std::size_t l = 0; l <= c.n_layers; ++l) {
      EXPECT_LT(max_diff_rows(a.layers[l], b.layers[l], plain.length()), 1e-8);
    }
    const PredictionDistribution da = qa_head(a, plain, w), db = qa_head(b, padded, w);
    for (std::size_t i = 0; i < plain.length(); ++i) EXPECT_NEAR(da.start[i], db.start[i], 1e-8);
    EXPECT_EQ(predict_span(da, 3), predict_span(db, 3));
  }
}

TEST(EncodeFull, DeterministicAcrossCalls) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const EncoderWeights w = random_weights(c);
  const std::vector<TokenId> q{5}, p{6, 7, 8};
  const SegmentPair pair = pack_pair(q, p, c);
  const HiddenStack a = encode_full(pair, w), b = encode_full(pair, w);
  for (std::size_t l = 0; l <= c.n_layers; ++l) EXPECT_TRUE(a.layers[l].bit_equal(b.layers[l]));
}

TEST(EncodeFull, NonFiniteActivationNamesLayer) {
  const ModelConfig c = tiny_config(2, 8, 2);
  EncoderWeights w = random_weights(c);
  w.layers[1].ffn_out_bias[0] = INFINITY;
  const std::vector<TokenId> q{5}, p{6, 7};
  try {
    encode_full(pack_pair(q, p, c), w);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 2"), std::string::npos) << e.what();
  }
}

TEST(AttentionLayer, SelfOnlyMaskAttendsToOwnValue) {
  ModelConfig c = tiny_config(1, 4, 1);
  EncoderWeights w = random_weights(c);
  LayerWeights& lw = w.layers[0];
  lw.value = Tensor::identity(4);
  lw.value_bias = Tensor({4}, 0.0);
  lw.output = Tensor::identity(4);
  lw.output_bias = Tensor({4}, 0.0);
  const Tensor x = Tensor::matrix({{0.3, -1.0, 2.0, 0.5}, {1.5, 0.2, -0.7, 0.1}, {-0.4, 0.9, 0.0, 1.2}});
  AttentionMask self;
  self.size = 3;
  self.allow = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  const Tensor y = attention_layer(x, self, lw, c);
  // With identity value/output projections a token that reads only itself
  // feeds 2x into the first norm.
  for (std::size_t i = 0; i < 3; ++i) {
    Tensor row({1, 4});
    for (std::size_t j = 0; j < 4; ++j) row(0, j) = 2.0 * x(i, j);
    const Tensor x1 = layer_norm(row, lw.attn_norm_gain, lw.attn_norm_bias, c.layer_norm_eps);
    Tensor hid = gelu(add_bias(matmul(x1, lw.ffn_in), lw.ffn_in_bias));
    const Tensor out =
        layer_norm(add(x1, add_bias(matmul(hid, lw.ffn_out), lw.ffn_out_bias)), lw.ffn_norm_gain, lw.ffn_norm_bias,
                   c.layer_norm_eps);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(y(i, j), out(0, j), 1e-12);
  }
}

TEST(AttentionLayer, FullMaskEqualsUnmaskedReference) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const EncoderWeights w = random_weights(c);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal;
  Tensor x({5, 8});
  for (double& v : x.data()) v = normal(rng);
  const std::vector<std::uint8_t> all(5, 1);
  const Tensor masked = attention_layer(x, AttentionMask::full(all), w.layers[0], c);
  Tape tape;
  const BoundWeights bound = bind_weights(tape, w, false);
  const Var y = attention_layer(bound.layers[0], tape.constant(x), AttentionMask::full(all), c);
  EXPECT_TRUE(masked.bit_equal(y.value()));
  // Reference loop with every key valid.
  const Matrix xm = to_matrix(x);
  Matrix q = mm(xm, to_matrix(w.layers[0].query));
  add_row(q, w.layers[0].query_bias);
  const Matrix k = mm(xm, to_matrix(w.layers[0].key));
  Matrix v = mm(xm, to_matrix(w.layers[0].value));
  add_row(v, w.layers[0].value_bias);
  Matrix ctx(5, std::vector<double>(8, 0.0));
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> e(5);
      double z = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < 4; ++t) dot += q[i][h * 4 + t] * k[j][h * 4 + t];
        e[j] = std::exp(dot / 2.0);
        z += e[j];
      }
      for (std::size_t j = 0; j < 5; ++j)
        for (std::size_t t = 0; t < 4; ++t) ctx[i][h * 4 + t] += e[j] / z * v[j][h * 4 + t];
    }
  Matrix att = mm(ctx, to_matrix(w.layers[0].output));
  add_row(att, w.layers[0].output_bias);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 8; ++j) att[i][j] += xm[i][j];
  const Matrix x1 = norm_rows(att, w.layers[0].attn_norm_gain, w.layers[0].attn_norm_bias, c.layer_norm_eps);
  const Tensor x1t = [&] {
    Tensor t({5, 8});
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 8; ++j) t(i, j) = x1[i][j];
    return t;
  }();
  const Tensor hid = gelu(add_bias(matmul(x1t, w.layers[0].ffn_in), w.layers[0].ffn_in_bias));
  const Tensor ref = layer_norm(add(x1t, add_bias(matmul(hid, w.layers[0].ffn_out), w.layers[0].ffn_out_bias)),
                                w.layers[0].ffn_norm_gain, w.layers[0].ffn_norm_bias, c.layer_norm_eps);
  EXPECT_LT(max_abs_diff(masked, ref), 1e-10);
}

TEST(AttentionLayer, AllFalseMaskRowRejected) {
  const ModelConfig c = tiny_config(1, 4, 1);
  const EncoderWeights w = random_weights(c);
  const Tensor x({2, 4}, 0.5);
  AttentionMask m;
  m.size = 2;
  m.allow = {1, 1, 0, 0};
  EXPECT_THROW(attention_layer(x, m, w.layers[0], c), InputError);
}

TEST(QaHead, UniformLogitsGiveUniformPassageDistribution) {
  ModelConfig c = tiny_config(1, 8, 2);
  EncoderWeights w = random_weights(c);
  w.span_head = Tensor({8, 2}, 0.0);
  const std::vector<TokenId> q{5}, p{6, 7, 8, 9};
  const SegmentPair pair = pack_pair(q, p, c, 2);
  const PredictionDistribution d = qa_head(encode_full(pair, w), pair, w);
  for (std::size_t i = 0; i < pair.length(); ++i) {
    const double expected = pair.is_passage_slot(i) ? 0.25 : 0.0;
    EXPECT_NEAR(d.start[i], expected, 1e-15);
    EXPECT_NEAR(d.end[i], expected, 1e-15);
    if (!pair.is_passage_slot(i)) {
      EXPECT_EQ(d.start[i], 0.0);
      EXPECT_EQ(d.end[i], 0.0);
    }
  }
}

TEST(QaHead, SingleValidSlotGetsAllMass) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const EncoderWeights w = random_weights(c);
  const std::vector<TokenId> q{5}, p{6};
  const SegmentPair pair = pack_pair(q, p, c);
  const PredictionDistribution d = qa_head(encode_full(pair, w), pair, w);
  EXPECT_EQ(d.start[pair.passage_offset()], 1.0);
  EXPECT_EQ(d.end[pair.passage_offset()], 1.0);
}

TEST(QaHead, MatchesMaskedSoftmaxReference) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const EncoderWeights w = random_weights(c, 1.0);
  std::mt19937_64 rng(21);
  const SegmentPair pair = pack_pair(random_tokens(rng, 2, 4, c), random_tokens(rng, 6, 9, c), c, 3);
  const HiddenStack stack = encode_full(pair, w);
  const PredictionDistribution d = qa_head(stack, pair, w);
  const Tensor& top = stack.layers.back();
  for (std::size_t col = 0; col < 2; ++col) {
    std::vector<double> logit(pair.length());
    double z = 0.0;
    for (std::size_t i = 0; i < pair.length(); ++i) {
      for (std::size_t j = 0; j < c.hidden_dim; ++j) logit[i] += top(i, j) * w.span_head(j, col);
    }
    for (std::size_t i = 0; i < pair.length(); ++i) z += pair.is_passage_slot(i) ? std::exp(logit[i]) : 0.0;
    const std::vector<double>& got = col == 0 ? d.start : d.end;
    double total = 0.0;
    for (std::size_t i = 0; i < pair.length(); ++i) {
      const double expected = pair.is_passage_slot(i) ? std::exp(logit[i]) / z : 0.0;
      EXPECT_NEAR(got[i], expected, 1e-10);
      total += got[i];
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
  }
}

TEST(QaHead, NoPassageSlotRejected) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const EncoderWeights w = random_weights(c);
  const std::vector<TokenId> q{5}, p{6};
  SegmentPair pair = pack_pair(q, p, c);
  const HiddenStack stack = encode_full(pair, w);
  pair.passage_len = 0;
  EXPECT_THROW(qa_head(stack, pair, w), InputError);
}

TEST(PredictSpan, PointMasses) {
  PredictionDistribution d = masked_uniform(0, 6, 6);
  d.start[2] = 1.0;
  d.end[4] = 1.0;
  EXPECT_EQ(predict_span(d, 5), (Span{2, 4}));
}

TEST(PredictSpan, EndBeforeStartFallsBackToBestDiagonal) {
  PredictionDistribution d = masked_uniform(0, 5, 5);
  d.start = {0.05, 0.05, 0.05, 0.8, 0.05};
  d.end = {0.1, 0.7, 0.1, 0.05, 0.05};
  const Span got = predict_span(d, 1);
  EXPECT_EQ(got.start, got.end);
  EXPECT_EQ(got, brute_force_span(d, 1));
}

TEST(PredictSpan, TiesGoToSmallestStartThenEnd) {
  PredictionDistribution d = masked_uniform(2, 4, 6);
  for (std::size_t i = 2; i < 6; ++i) d.start[i] = d.end[i] = 0.25;
  EXPECT_EQ(predict_span(d, 3), (Span{0, 0}));
  EXPECT_THROW(predict_span(d, 0), ParameterError);
}

TEST(PredictSpan, RandomDistributionsMatchExhaustiveEnumeration) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> len(1, 12), max_len(1, 5), off(0, 4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = len(rng), o = off(rng);
    PredictionDistribution d = masked_uniform(o, n, o + n + 1);
    for (std::size_t i = o; i < o + n; ++i) {
      d.start[i] = u(rng);
      d.end[i] = u(rng);
    }
    const std::size_t m = max_len(rng);
    EXPECT_EQ(predict_span(d, m), brute_force_span(d, m));
  }
}

TEST(Weights, FingerprintTracksEveryParameterAndConfigField) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const EncoderWeights w = random_weights(c);
  const Fingerprint base = w.fingerprint();
  EXPECT_EQ(base, w.fingerprint());
  const auto count = w.parameters().size();
  for (std::size_t i = 0; i < count; ++i) {
    EncoderWeights changed = w;
    (*changed.parameters()[i])[0] += 0.25;
    EXPECT_FALSE(changed.fingerprint() == base) << w.parameter_names()[i];
  }
  EncoderWeights other = w;
  other.config.layer_norm_eps = 1e-6;
  EXPECT_FALSE(other.fingerprint() == base);
}

TEST(Weights, InitializationIsSeededAndShaped) {
  const ModelConfig c = tiny_config(2, 8, 2);
  const EncoderWeights a = EncoderWeights::initialize(c), b = EncoderWeights::initialize(c);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_NO_THROW(a.validate_shapes());
  EncoderWeights bad = a;
  bad.layers[0].ffn_in = Tensor({8, 3});
  EXPECT_THROW(bad.validate_shapes(), ConfigurationError);
}

TEST(Checkpoint, RoundTripPreservesF32WeightsAndFingerprint) {
  const ModelConfig c = tiny_config(2, 8, 2);
  EncoderWeights w = random_weights(c);
  w.round_to_f32();
  const auto path = std::filesystem::temp_directory_path() / "deformer_ckpt_test.dfwt";
  save_checkpoint(path, w);
  const EncoderWeights back = load_checkpoint(path);
  EXPECT_EQ(back.config, w.config);
  EXPECT_EQ(back.fingerprint(), w.fingerprint());
  const auto a = w.parameters();
  const auto b = back.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i]->bit_equal(*b[i]));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptedPayloadFailsFingerprintCheck) {
  const ModelConfig c = tiny_config(1, 8, 2);
  const EncoderWeights w = random_weights(c);
  std::vector<std::uint8_t> bytes = serialize_checkpoint(w);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "DFWT");
  bytes[bytes.size() - 3] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(bytes), FormatError);
  const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 20);
  EXPECT_THROW(deserialize_checkpoint(truncated), FormatError);
}
