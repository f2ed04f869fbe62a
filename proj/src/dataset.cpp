#include "deformer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"

namespace deformer {

namespace {

std::string key_token(std::size_t i) { return "k" + std::to_string(i); }
std::string value_token(std::size_t i) { return "v" + std::to_string(i); }
std::string filler_token(std::size_t i) { return "w" + std::to_string(i); }

bool is_key(const std::string& t) { return !t.empty() && t[0] == 'k'; }

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

QaRecord make_record(const SyntheticTaskSpec& spec, std::mt19937_64& rng, std::string id) {
  const std::size_t pairs = uniform(rng, spec.min_pairs, spec.max_pairs);
  std::vector<std::size_t> keys(spec.n_keys);
  for (std::size_t i = 0; i < keys.size(); ++i) keys[i] = i;
  std::shuffle(keys.begin(), keys.end(), rng);
  keys.resize(pairs);
  const std::size_t target = uniform(rng, 0, pairs - 1);

  QaRecord r;
  r.id = std::move(id);
  for (std::size_t p = 0; p < pairs; ++p) {
    r.passage.push_back(key_token(keys[p]));
    const std::size_t len = uniform(rng, spec.min_span, spec.max_span);
    if (p == target) {
      r.answer_start = r.passage.size();
      r.answer_end = r.passage.size() + len - 1;
    }
    for (std::size_t v = 0; v < len; ++v) r.passage.push_back(value_token(uniform(rng, 0, spec.n_values - 1)));
  }
  const std::size_t fillers = spec.n_fillers == 0 ? 0 : uniform(rng, 0, spec.max_question_fillers);
  for (std::size_t f = 0; f < fillers; ++f) r.question.push_back(filler_token(uniform(rng, 0, spec.n_fillers - 1)));
  r.question.push_back(key_token(keys[target]));
  return r;
}

}  // namespace

void SyntheticTaskSpec::validate() const {
  if (n_keys == 0 || n_values == 0) throw ConfigurationError("synthetic task needs keys and values");
  if (min_pairs == 0 || min_pairs > max_pairs || max_pairs > n_keys) {
    throw ConfigurationError("pair count range must satisfy 1 <= min <= max <= n_keys");
  }
  if (min_span == 0 || min_span > max_span) throw ConfigurationError("span length range must satisfy 1 <= min <= max");
  if (tune_fraction < 0.0 || tune_fraction >= 1.0) throw ConfigurationError("tune fraction must lie in [0, 1)");
  if (train_total == 0) throw ConfigurationError("train_total must be positive");
}

std::vector<std::string> SyntheticTaskSpec::tokens() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n_keys; ++i) out.push_back(key_token(i));
  for (std::size_t i = 0; i < n_values; ++i) out.push_back(value_token(i));
  for (std::size_t i = 0; i < n_fillers; ++i) out.push_back(filler_token(i));
  return out;
}

DatasetSplits generate_synthetic(const SyntheticTaskSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  DatasetSplits out;
  const auto tune_count = static_cast<std::size_t>(std::llround(spec.tune_fraction * static_cast<double>(spec.train_total)));
  for (std::size_t i = 0; i < spec.train_total; ++i) {
    QaRecord r = make_record(spec, rng, "train-" + std::to_string(i));
    if (i < spec.train_total - tune_count) {
      out.train.push_back(std::move(r));
    } else {
      r.id = "tune-" + std::to_string(i - (spec.train_total - tune_count));
      out.tune.push_back(std::move(r));
    }
  }
  for (std::size_t i = 0; i < spec.dev; ++i) out.dev.push_back(make_record(spec, rng, "dev-" + std::to_string(i)));
  return out;
}

void verify_synthetic_record(const QaRecord& r) {
  auto fail = [&](const std::string& why) { throw InputError("record " + r.id + ": " + why); };
  if (r.question.empty() || !is_key(r.question.back())) fail("question does not end in a key");
  const auto hits = std::count(r.passage.begin(), r.passage.end(), r.question.back());
  if (hits != 1) fail("question key occurs " + std::to_string(hits) + " times in the passage");
  const auto at = static_cast<std::size_t>(std::find(r.passage.begin(), r.passage.end(), r.question.back()) -
                                           r.passage.begin());
  std::size_t end = at + 1;
  while (end < r.passage.size() && !is_key(r.passage[end])) ++end;
  if (r.answer_start != at + 1 || r.answer_end + 1 != end) fail("gold span is not the key's value span");
}

void write_jsonl(const std::filesystem::path& path, const std::vector<QaRecord>& records) {
  std::string text;
  for (const QaRecord& r : records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["question"] = r.question;
    j["passage"] = r.passage;
    j["answer_start"] = r.answer_start;
    j["answer_end"] = r.answer_end;
    text += j.dump();
    text += '\n';
  }
  binary::write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<QaRecord> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<QaRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      QaRecord r;
      r.id = j.at("id").get<std::string>();
      r.question = j.at("question").get<std::vector<std::string>>();
      r.passage = j.at("passage").get<std::vector<std::string>>();
      r.answer_start = j.at("answer_start").get<std::size_t>();
      r.answer_end = j.at("answer_end").get<std::size_t>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Example> encode_records(const std::vector<QaRecord>& records, const Vocabulary& vocab) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const QaRecord& r : records) {
    for (const auto* side : {&r.question, &r.passage}) {
      for (const std::string& t : *side) {
        if (!vocab.contains(t)) throw InputError("record " + r.id + ": token '" + t + "' not in vocabulary");
      }
    }
    if (r.answer_start > r.answer_end || r.answer_end >= r.passage.size()) {
      throw InputError("record " + r.id + ": answer span outside the passage");
    }
    out.push_back({r.id, vocab.encode(r.question), vocab.encode(r.passage), {r.answer_start, r.answer_end}});
  }
  return out;
}

double span_f1(Span predicted, Span gold) {
  const std::size_t lo = std::max(predicted.start, gold.start), hi = std::min(predicted.end, gold.end);
  if (lo > hi) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(predicted.end - predicted.start + 1);
  const double recall = overlap / static_cast<double>(gold.end - gold.start + 1);
  return 2.0 * precision * recall / (precision + recall);
}

EvalMetrics evaluate(const std::vector<Example>& examples, const SpanPredictor& predict) {
  if (examples.empty()) throw InputError("cannot evaluate an empty dataset");
  EvalMetrics m;
  m.count = examples.size();
  double em = 0.0, f1 = 0.0;
  for (const Example& e : examples) {
    const Span p = predict(e);
    em += p == e.answer ? 1.0 : 0.0;
    f1 += span_f1(p, e.answer);
  }
  m.exact_match = 100.0 * em / static_cast<double>(m.count);
  m.f1 = 100.0 * f1 / static_cast<double>(m.count);
  return m;
}

SpanPredictor full_model_predictor(const EncoderWeights& weights, std::size_t max_span_len) {
  return [&weights, max_span_len](const Example& e) {
    const SegmentPair pair = pack_pair(e.question, e.passage, weights.config);
    return predict_span(qa_head(encode_full(pair, weights), pair, weights), max_span_len);
  };
}

}  // namespace deformer
