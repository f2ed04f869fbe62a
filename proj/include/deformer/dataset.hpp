#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "deformer/encoder.hpp"

namespace deformer {

/// One extractive QA record as stored on disk. The answer span is inclusive
/// and indexes passage tokens.
struct QaRecord {
  std::string id;
  std::vector<std::string> question;
  std::vector<std::string> passage;
  std::size_t answer_start = 0;
  std::size_t answer_end = 0;

  friend bool operator==(const QaRecord&, const QaRecord&) = default;
};

struct Example {
  std::string id;
  std::vector<TokenId> question;
  std::vector<TokenId> passage;
  Span answer;
};

/// Key-value span lookup. A passage is a shuffled run of (key, value span)
/// pairs with distinct keys; the question is a key, optionally preceded by
/// filler words; the answer is the value span that follows that key.
struct SyntheticTaskSpec {
  std::size_t n_keys = 8;
  std::size_t n_values = 8;
  std::size_t n_fillers = 4;
  std::size_t min_pairs = 2;
  std::size_t max_pairs = 3;
  std::size_t min_span = 1;
  std::size_t max_span = 2;
  std::size_t max_question_fillers = 1;
  std::size_t train_total = 4000;  // before the tune split is carved out
  std::size_t dev = 400;
  double tune_fraction = 0.1;
  std::uint64_t seed = 1;

  // Throws ConfigurationError on an inconsistent spec.
  void validate() const;
  std::size_t max_passage_len() const { return max_pairs * (1 + max_span); }
  std::size_t max_question_len() const { return max_question_fillers + 1; }
  // Every token the generator can emit.
  std::vector<std::string> tokens() const;
};

struct DatasetSplits {
  std::vector<QaRecord> train;
  std::vector<QaRecord> tune;
  std::vector<QaRecord> dev;
};

DatasetSplits generate_synthetic(const SyntheticTaskSpec& spec);

// Checks that the gold span is the value span of the question's key.
// Throws InputError naming the record otherwise.
void verify_synthetic_record(const QaRecord& record);

// Line-delimited JSON: {"id", "question", "passage", "answer_start", "answer_end"}.
void write_jsonl(const std::filesystem::path& path, const std::vector<QaRecord>& records);
std::vector<QaRecord> read_jsonl(const std::filesystem::path& path);

// Throws InputError if a token is missing from the vocabulary or the span
// lies outside the passage.
std::vector<Example> encode_records(const std::vector<QaRecord>& records, const Vocabulary& vocab);

struct EvalMetrics {
  std::size_t count = 0;
  double exact_match = 0.0;  // percent
  double f1 = 0.0;           // percent
};

// Token-overlap F1 between two inclusive spans, in [0, 1].
double span_f1(Span predicted, Span gold);

using SpanPredictor = std::function<Span(const Example&)>;

// Throws InputError on an empty example list.
EvalMetrics evaluate(const std::vector<Example>& examples, const SpanPredictor& predict);

inline constexpr std::size_t kDefaultMaxSpanLen = 8;

SpanPredictor full_model_predictor(const EncoderWeights& weights, std::size_t max_span_len = kDefaultMaxSpanLen);

}  // namespace deformer
