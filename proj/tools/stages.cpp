#include "stages.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "artifacts.hpp"
#include "deformer/analysis.hpp"
#include "deformer/binary_io.hpp"
#include "deformer/bo_tuner.hpp"
#include "deformer/cache_store.hpp"
#include "deformer/checkpoint.hpp"
#include "deformer/errors.hpp"
#include "deformer/flop_counter.hpp"
#include "deformer/metering.hpp"

namespace deformer::cli {

namespace {

constexpr const char* kTrain = "data/train.jsonl";
constexpr const char* kTune = "data/tune.jsonl";
constexpr const char* kDev = "data/dev.jsonl";
constexpr const char* kVocab = "data/vocab.txt";
constexpr const char* kTeacher = "models/teacher.dfwt";
constexpr const char* kStudentInit = "models/student_init.dfwt";
constexpr const char* kStudent = "models/student.dfwt";
constexpr const char* kCache = "cache/dev.dfrm";

// ---------------------------------------------------------------------------
// Stage keys. Each key covers the stage's own settings and its upstream key.

std::string data_key(const RunConfig& c) {
  const SyntheticTaskSpec& d = c.data;
  return KeyBuilder("data")
      .add("n_keys", d.n_keys)
      .add("n_values", d.n_values)
      .add("n_fillers", d.n_fillers)
      .add("min_pairs", d.min_pairs)
      .add("max_pairs", d.max_pairs)
      .add("min_span", d.min_span)
      .add("max_span", d.max_span)
      .add("max_question_fillers", d.max_question_fillers)
      .add("train_total", d.train_total)
      .add("dev", d.dev)
      .add("tune_fraction", d.tune_fraction)
      .add("seed", d.seed)
      .digest();
}

KeyBuilder& add_training(KeyBuilder& k, const RunConfig& c) {
  return k.add("batch", c.batch)
      .add("warmup", c.warmup)
      .add("eval_interval", c.eval_interval)
      .add("eval_examples", c.eval_examples)
      .add("train_seed", c.train_seed)
      .add("max_span_len", c.max_span_len);
}

std::string teacher_key(const RunConfig& c) {
  KeyBuilder k("teacher");
  k.add("data", data_key(c))
      .add("layers", c.layers)
      .add("hidden", c.hidden)
      .add("heads", c.heads)
      .add("ffn", c.ffn)
      .add("init_std", c.init_std)
      .add("model_seed", c.model_seed)
      .add("steps", c.teacher_steps)
      .add("lr", c.teacher_lr);
  return add_training(k, c).digest();
}

std::string decompose_key(const RunConfig& c) {
  return KeyBuilder("decompose").add("teacher", teacher_key(c)).add("k", c.k).digest();
}

std::string finetune_key(const RunConfig& c) {
  KeyBuilder k("finetune");
  k.add("decompose", decompose_key(c))
      .add("gamma", c.weights.gamma)
      .add("alpha", c.weights.alpha)
      .add("beta", c.weights.beta)
      .add("lrs_from_split", c.lrs_from_split)
      .add("steps", c.finetune_steps)
      .add("lr", c.finetune_lr);
  return add_training(k, c).digest();
}

std::string cache_key_of(const RunConfig& c) {
  return KeyBuilder("cache").add("finetune", finetune_key(c)).add("precision", c.precision).digest();
}

std::string eval_key(const RunConfig& c) { return KeyBuilder("eval").add("cache", cache_key_of(c)).digest(); }

std::string analyze_key(const RunConfig& c) {
  return KeyBuilder("analyze")
      .add("finetune", finetune_key(c))
      .add("probe_passages", c.probe_passages)
      .add("probe_questions", c.probe_questions)
      .add("variance_mode", c.variance_mode)
      .add("metric", c.metric)
      .digest();
}

std::string tune_key(const RunConfig& c) {
  KeyBuilder k("tune");
  k.add("decompose", decompose_key(c))
      .add("iterations", c.tune_iterations)
      .add("steps", c.tune_steps)
      .add("seed", c.tune_seed)
      .add("lo", c.tune_lo)
      .add("hi", c.tune_hi)
      .add("lr", c.finetune_lr)
      .add("lrs_from_split", c.lrs_from_split);
  return add_training(k, c).digest();
}

std::string profile_key(const RunConfig& c) {
  return KeyBuilder("profile")
      .add("data", data_key(c))
      .add("layers", c.layers)
      .add("hidden", c.hidden)
      .add("heads", c.heads)
      .add("ffn", c.ffn)
      .add("k", c.k)
      .add("precision", c.precision)
      .add("shape", c.profile_shape)
      .add("q_len", c.profile_q_len)
      .add("p_len", c.profile_p_len)
      .digest();
}

std::string cost_key(const RunConfig& c) {
  return KeyBuilder("cost")
      .add("g_u", c.cost.g_u)
      .add("n_seq", c.cost.n_seq)
      .add("b", c.cost.b)
      .add("t_b", c.cost.t_b)
      .add("t_b_decomposed", c.decomposed_batch_seconds)
      .add("s", c.cost.s)
      .add("s_u", c.cost.s_u)
      .add("r_u", c.cost.r_u)
      .add("storage_tokens", c.storage_tokens)
      .add("storage_hidden", c.storage_hidden)
      .add("storage_bytes", c.storage_bytes)
      .digest();
}

// ---------------------------------------------------------------------------
// Artifact helpers

void prepare_dirs(const RunConfig& c) {
  for (const char* sub : {"data", "models", "cache", "reports", "stamps"}) {
    std::filesystem::create_directories(c.run_dir / sub);
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  binary::write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

Vocabulary load_vocab(const ArtifactStore& store) {
  const std::vector<std::uint8_t> bytes = binary::read_file(store.path(kVocab));
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::vector<std::string> tokens;
  for (std::string line; std::getline(in, line);) tokens.push_back(line);
  return Vocabulary::from_tokens(std::move(tokens));
}

struct Data {
  Vocabulary vocab;
  std::vector<QaRecord> dev_records;
  std::vector<Example> train, tune, dev;
};

Data load_data(const ArtifactStore& store) {
  Data d;
  d.vocab = load_vocab(store);
  d.dev_records = read_jsonl(store.path(kDev));
  d.train = encode_records(read_jsonl(store.path(kTrain)), d.vocab);
  d.tune = encode_records(read_jsonl(store.path(kTune)), d.vocab);
  d.dev = encode_records(d.dev_records, d.vocab);
  return d;
}

void require_data(const RunConfig& c, const ArtifactStore& s) { s.require("data", data_key(c), "gen-data"); }
void require_teacher(const RunConfig& c, const ArtifactStore& s) {
  require_data(c, s);
  s.require("teacher", teacher_key(c), "train-teacher");
}
void require_decompose(const RunConfig& c, const ArtifactStore& s) {
  require_teacher(c, s);
  s.require("decompose", decompose_key(c), "decompose");
}
void require_finetune(const RunConfig& c, const ArtifactStore& s) {
  require_decompose(c, s);
  s.require("finetune", finetune_key(c), "finetune");
}

EncoderWeights load_model(const ArtifactStore& s, const char* rel, const ModelConfig& expected) {
  EncoderWeights w = load_checkpoint(s.path(rel));
  ModelConfig shape = w.config;
  shape.seed = expected.seed;
  shape.init_std = expected.init_std;
  if (!(shape == expected)) throw StaleArtifactError(std::string(rel) + " does not match the configured model shape");
  return w;
}

// ---------------------------------------------------------------------------
// Plain-text tables

class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }
  std::string render() const {
    std::vector<std::size_t> width;
    for (const auto& r : rows_) {
      width.resize(std::max(width.size(), r.size()), 0);
      for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream out;
    for (std::size_t n = 0; n < rows_.size(); ++n) {
      for (std::size_t i = 0; i < rows_[n].size(); ++i) {
        if (i == 0) {
          out << std::left << std::setw(static_cast<int>(width[i])) << rows_[n][i];
        } else {
          out << "  " << std::right << std::setw(static_cast<int>(width[i])) << rows_[n][i];
        }
      }
      out << "\n";
      if (n == 0) {
        std::size_t total = 0;
        for (std::size_t w : width) total += w + 2;
        out << std::string(total - 2, '-') << "\n";
      }
    }
    return out.str();
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

std::string fixed(double v, int digits = 2) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(digits) << v;
  return out.str();
}

std::string json_lines(const std::vector<nlohmann::ordered_json>& records) {
  std::string text;
  for (const auto& r : records) text += r.dump() + "\n";
  return text;
}

void report(const ArtifactStore& s, const std::string& name, const std::string& text,
            const std::vector<nlohmann::ordered_json>& records, std::vector<std::string>& outputs) {
  std::cout << text;
  write_text(s.path("reports/" + name + ".txt"), text);
  write_text(s.path("reports/" + name + ".jsonl"), json_lines(records));
  outputs.push_back("reports/" + name + ".txt");
  outputs.push_back("reports/" + name + ".jsonl");
}

// Questions for the variance probes: each key in the passage, bare and then
// behind each filler word, until `count` are collected.
std::vector<PassageQuestions> variance_probes(const std::vector<QaRecord>& records, const Vocabulary& vocab,
                                              const SyntheticTaskSpec& spec, std::size_t passages,
                                              std::size_t count) {
  std::vector<PassageQuestions> out;
  for (const QaRecord& r : records) {
    if (out.size() == passages) break;
    std::vector<std::vector<std::string>> questions;
    for (std::size_t f = 0; f <= spec.n_fillers && questions.size() < count; ++f) {
      if (f > 0 && spec.max_question_fillers == 0) break;
      for (const std::string& tok : r.passage) {
        if (tok.empty() || tok[0] != 'k' || questions.size() == count) continue;
        questions.push_back(f == 0 ? std::vector<std::string>{tok}
                                   : std::vector<std::string>{"w" + std::to_string(f - 1), tok});
      }
    }
    if (questions.size() < 2) continue;
    PassageQuestions p{vocab.encode(r.passage), {}};
    for (const auto& q : questions) p.questions.push_back(vocab.encode(q));
    out.push_back(std::move(p));
  }
  return out;
}

double mean_over(const std::vector<double>& v, std::size_t from) {
  double s = 0.0;
  for (std::size_t i = from; i < v.size(); ++i) s += v[i];
  return v.size() > from ? s / static_cast<double>(v.size() - from) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

void gen_data(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  s.run("data", data_key(c), c.force, [&] {
    const DatasetSplits splits = generate_synthetic(c.data);
    for (const auto* split : {&splits.train, &splits.tune, &splits.dev}) {
      for (const QaRecord& r : *split) verify_synthetic_record(r);
    }
    write_jsonl(s.path(kTrain), splits.train);
    write_jsonl(s.path(kTune), splits.tune);
    write_jsonl(s.path(kDev), splits.dev);
    const Vocabulary built = Vocabulary::build(c.data.tokens());
    std::string vocab;
    for (const std::string& t : built.tokens()) vocab += t + "\n";
    write_text(s.path(kVocab), vocab);
    std::cout << "train " << splits.train.size() << ", tune " << splits.tune.size() << ", dev " << splits.dev.size()
              << " records\n";
    return std::vector<std::string>{kTrain, kTune, kDev, kVocab};
  });
}

void train_teacher(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_data(c, s);
  s.run("teacher", teacher_key(c), c.force, [&] {
    const Data d = load_data(s);
    const TeacherResult r = deformer::train_teacher(d.train, d.dev, c.model_config(d.vocab.size()), c.teacher_options());
    save_checkpoint(s.path(kTeacher), r.weights);
    write_history(s.path("reports/teacher_history.jsonl"), r.history);
    for (const HistoryRecord& h : r.history) {
      if (h.exact_match) std::cout << "step " << h.step << "  loss " << fixed(h.loss.l_total, 4) << "  dev EM " << fixed(*h.exact_match) << "\n";
    }
    return std::vector<std::string>{kTeacher, "reports/teacher_history.jsonl"};
  });
}

void decompose(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_teacher(c, s);
  s.run("decompose", decompose_key(c), c.force, [&] {
    const Vocabulary vocab = load_vocab(s);
    const EncoderWeights teacher = load_model(s, kTeacher, c.model_config(vocab.size()));
    const DeformerModel m = transfer_weights(teacher, c.k);
    save_checkpoint(s.path(kStudentInit), m.weights);
    std::cout << "lower layers 1.." << c.k << " segment-local, layers " << c.k + 1 << ".." << c.layers
              << " joint; " << m.weights.parameter_count() << " parameters copied\n";
    return std::vector<std::string>{kStudentInit};
  });
}

void finetune(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_decompose(c, s);
  s.run("finetune", finetune_key(c), c.force, [&] {
    const Data d = load_data(s);
    const ModelConfig mc = c.model_config(d.vocab.size());
    const EncoderWeights teacher = load_model(s, kTeacher, mc);
    const DeformerModel init{load_model(s, kStudentInit, mc), c.k};
    const FineTuneResult r =
        fine_tune(init, teacher, d.train, d.dev, c.weights, c.finetune_options(), c.lrs_layers());
    save_checkpoint(s.path(kStudent), r.model.weights);
    write_history(s.path("reports/finetune_history.jsonl"), r.history);
    for (const HistoryRecord& h : r.history) {
      if (h.exact_match) {
        std::cout << "step " << h.step << "  ts " << fixed(h.loss.l_ts, 4) << "  kd " << fixed(h.loss.l_kd, 4)
                  << "  lrs " << fixed(h.loss.l_lrs, 2) << "  dev EM " << fixed(*h.exact_match) << "\n";
      }
    }
    return std::vector<std::string>{kStudent, "reports/finetune_history.jsonl"};
  });
}

void encode_cache(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_finetune(c, s);
  s.run("cache", cache_key_of(c), c.force, [&] {
    const Data d = load_data(s);
    const DeformerModel m{load_model(s, kStudent, c.model_config(d.vocab.size())), c.k};
    std::vector<std::vector<TokenId>> passages;
    for (const Example& e : d.dev) passages.push_back(e.passage);
    const StoreSummary sum = encode_and_store(passages, m, c.storage(), s.path(kCache));
    std::cout << sum.entries << " passages cached (" << sum.duplicates << " duplicates), " << sum.file_bytes
              << " bytes, " << sum.offline_flops << " offline FLOPs\n";
    return std::vector<std::string>{kCache};
  });
}

void tune(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_decompose(c, s);
  s.run("tune", tune_key(c), c.force, [&] {
    const Data d = load_data(s);
    const ModelConfig mc = c.model_config(d.vocab.size());
    const EncoderWeights teacher = load_model(s, kTeacher, mc);
    const DeformerModel init{load_model(s, kStudentInit, mc), c.k};
    TrainOptions o = c.finetune_options();
    o.steps = c.tune_steps;
    o.eval_interval = 0;
    o.eval_examples = 0;
    std::size_t trial = 0;
    const TuneResult r = bo_tune(
        [&](const LossWeights& w) {
          const FineTuneResult f = fine_tune(init, teacher, d.train, {}, w, o, c.lrs_layers());
          const double em = evaluate(d.tune, deformer_predictor(f.model, c.max_span_len)).exact_match;
          std::cout << "trial " << trial++ << "  gamma " << fixed(w.gamma, 3) << "  alpha " << fixed(w.alpha, 3)
                    << "  beta " << fixed(w.beta, 3) << "  tune EM " << fixed(em) << "\n";
          return em;
        },
        {c.tune_lo, c.tune_hi}, c.tune_iterations, c.tune_seed);
    write_trials(s.path("reports/tune_trials.jsonl"), r.trials);
    std::ostringstream text;
    text << "best weights after " << r.trials.size() << " trials: gamma=" << fixed(r.best.weights.gamma, 4)
         << " alpha=" << fixed(r.best.weights.alpha, 4) << " beta=" << fixed(r.best.weights.beta, 4)
         << "  (tune EM " << fixed(r.best.objective) << ")\n";
    std::cout << text.str();
    write_text(s.path("reports/tune.txt"), text.str());
    return std::vector<std::string>{"reports/tune_trials.jsonl", "reports/tune.txt"};
  });
}

void eval(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_finetune(c, s);
  s.require("cache", cache_key_of(c), "encode-cache");
  s.run("eval", eval_key(c), c.force, [&] {
    const Data d = load_data(s);
    const ModelConfig mc = c.model_config(d.vocab.size());
    const EncoderWeights teacher = load_model(s, kTeacher, mc);
    const DeformerModel student{load_model(s, kStudent, mc), c.k};
    const CacheFile cache = CacheFile::read(s.path(kCache));
    if (cache.header().split_layer != c.k || !(cache.header().fingerprint == student.weights_fingerprint())) {
      throw StaleArtifactError("cache " + s.path(kCache).string() + " was built for another model or k; rerun `deformer encode-cache`");
    }
    const SpanPredictor inline_pred = deformer_predictor(student, c.max_span_len, cache.header().precision);
    const SpanPredictor cached_pred = cached_deformer_predictor(student, cache, c.max_span_len);
    std::size_t agree = 0;
    for (const Example& e : d.dev) agree += inline_pred(e) == cached_pred(e);
    const EvalMetrics t = evaluate(d.dev, full_model_predictor(teacher, c.max_span_len));
    const EvalMetrics u = evaluate(d.dev, inline_pred);
    const EvalMetrics k = evaluate(d.dev, cached_pred);
    const double retention = t.exact_match > 0.0 ? 100.0 * u.exact_match / t.exact_match : 0.0;

    Table table({"model", "examples", "EM", "F1"});
    std::vector<nlohmann::ordered_json> records;
    for (const auto& [name, m] : {std::pair{"teacher", t}, std::pair{"deformer", u}, std::pair{"deformer+cache", k}}) {
      table.add({name, std::to_string(m.count), fixed(m.exact_match), fixed(m.f1)});
      records.push_back({{"model", name}, {"split", "dev"}, {"count", m.count}, {"em", m.exact_match}, {"f1", m.f1}});
    }
    std::ostringstream text;
    text << table.render() << "retention (EM): " << fixed(retention) << "%  drop: " << fixed(t.exact_match - u.exact_match)
         << " points\ncached predictions identical to inline: " << agree << "/" << d.dev.size() << "\n";
    records.push_back({{"retention_em", retention},
                       {"drop_em", t.exact_match - u.exact_match},
                       {"cached_identical", agree == d.dev.size()}});
    std::vector<std::string> outputs;
    report(s, "eval", text.str(), records, outputs);
    return outputs;
  });
}

void profile(const RunConfig& run) {
  RunConfig c = run;
  const bool bert = c.profile_shape == "bert-base" || c.profile_shape == "bert-large";
  if (bert) {
    const bool base = c.profile_shape == "bert-base";
    c.layers = base ? 12 : 24;
    c.hidden = base ? 768 : 1024;
    c.heads = base ? 12 : 16;
    c.ffn = 4 * c.hidden;
  }
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  s.run("profile", profile_key(c), c.force, [&] {
    ModelConfig mc = c.model_config(Vocabulary::build(c.data.tokens()).size());
    if (bert) {
      mc.vocab_size = 30522;
      mc.q_max = 32;
      mc.p_max = 286;
    }
    const std::size_t q_len = c.profile_q_len ? c.profile_q_len : mc.q_max;
    const std::size_t p_len = c.profile_p_len ? c.profile_p_len : mc.p_max;
    const std::uint64_t bytes = bytes_per_scalar(c.storage());
    const FlopReport full = flops_full(mc, q_len, p_len);
    const FlopReport dec = flops_decomposed(mc, q_len, p_len, c.k, bytes);
    const std::uint64_t mem_full = memory_estimate(mc, q_len, p_len, c.k, MemoryMode::full, bytes);
    const std::uint64_t mem_dec = memory_estimate(mc, q_len, p_len, c.k, MemoryMode::decomposed, bytes);

    Table table({"model", "online GFLOPs", "offline GFLOPs", "activation MB", "cache bytes/query"});
    table.add({"full", fixed(static_cast<double>(full.online) / 1e9, 4), "0", fixed(static_cast<double>(mem_full) / 1e6, 3), "0"});
    table.add({"decomposed k=" + std::to_string(c.k), fixed(static_cast<double>(dec.online) / 1e9, 4),
               fixed(static_cast<double>(dec.offline) / 1e9, 4), fixed(static_cast<double>(mem_dec) / 1e6, 3),
               std::to_string(dec.cache_bytes)});
    const double speedup = static_cast<double>(full.online) / static_cast<double>(dec.online);
    std::ostringstream text;
    text << "shape " << c.profile_shape << ": n=" << mc.n_layers << " d=" << mc.hidden_dim << " heads=" << mc.n_heads
         << " ffn=" << mc.ffn_dim << ", question slots " << q_len << ", passage tokens " << p_len << "\n"
         << table.render() << "online speedup: " << fixed(speedup) << "x\n";
    std::vector<nlohmann::ordered_json> records{
        {{"model", "full"}, {"online_flops", full.online}, {"offline_flops", 0}, {"activation_bytes", mem_full}},
        {{"model", "decomposed"}, {"k", c.k}, {"online_flops", dec.online}, {"offline_flops", dec.offline},
         {"activation_bytes", mem_dec}, {"cache_bytes", dec.cache_bytes}, {"speedup", speedup}}};

    if (c.profile_shape == "run") {
      std::mt19937_64 rng(c.model_seed);
      std::uniform_int_distribution<TokenId> tok(static_cast<TokenId>(kReservedTokens),
                                                 static_cast<TokenId>(mc.vocab_size - 1));
      std::vector<TokenId> q(1), p(p_len);
      for (TokenId& t : q) t = tok(rng);
      for (TokenId& t : p) t = tok(rng);
      const EncoderWeights w = EncoderWeights::initialize(mc);
      const DeformerModel m = transfer_weights(w, c.k);
      const SegmentPair pair = pack_pair(q, p, mc);
      const std::uint64_t counted_full = count_oracle([&] { (void)qa_head(encode_full(pair, w), pair, w); });
      const std::uint64_t counted_dec = count_oracle([&] { (void)deformer_forward(q, p, m); });
      const bool match = counted_full == full.total() && counted_dec == dec.total();
      text << "instrumented count, full: " << counted_full << " (analytic " << full.total() << ")\n"
           << "instrumented count, decomposed inline: " << counted_dec << " (analytic " << dec.total() << ")\n"
           << "analytic model " << (match ? "matches" : "DOES NOT match") << " the instrumented counts\n";
      records.push_back({{"instrumented_full", counted_full}, {"instrumented_decomposed", counted_dec}, {"match", match}});
    }
    std::vector<std::string> outputs;
    report(s, "profile", text.str(), records, outputs);
    return outputs;
  });
}

void cost(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  s.run("cost", cost_key(c), c.force, [&] {
    const double original = cost_original(c.cost);
    CostParams decomposed = c.cost;
    decomposed.t_b = c.decomposed_batch_seconds;
    const CostBreakdown dec = cost_decomposed(decomposed);
    const std::uint64_t bytes = estimate_size(c.storage_tokens, c.storage_hidden, c.storage_bytes);
    Table table({"model", "accelerator $", "reads $", "storage $", "total $/month"});
    table.add({"original", fixed(original, 1), "0.0", "0.0", fixed(original, 1)});
    table.add({"decomposed", fixed(dec.gpu, 1), fixed(dec.reads, 1), fixed(dec.storage, 1), fixed(dec.total(), 1)});
    std::ostringstream text;
    text << table.render() << "cached passage of " << c.storage_tokens << " tokens x " << c.storage_hidden << " x "
         << c.storage_bytes << " bytes: " << bytes << " bytes (" << fixed(static_cast<double>(bytes) / 1024.0, 1)
         << " KiB)\n";
    std::vector<nlohmann::ordered_json> records{
        {{"model", "original"}, {"total", original}},
        {{"model", "decomposed"}, {"accelerator", dec.gpu}, {"reads", dec.reads}, {"storage", dec.storage}, {"total", dec.total()}},
        {{"storage_tokens", c.storage_tokens}, {"storage_bytes", bytes}}};
    std::vector<std::string> outputs;
    report(s, "cost", text.str(), records, outputs);
    return outputs;
  });
}

void analyze(const RunConfig& c) {
  c.validate();
  prepare_dirs(c);
  const ArtifactStore s(c.run_dir);
  require_finetune(c, s);
  s.run("analyze", analyze_key(c), c.force, [&] {
    const Data d = load_data(s);
    const ModelConfig mc = c.model_config(d.vocab.size());
    const EncoderWeights teacher = load_model(s, kTeacher, mc);
    const DeformerModel student{load_model(s, kStudent, mc), c.k};
    const auto probes = variance_probes(d.dev_records, d.vocab, c.data, c.probe_passages, c.probe_questions);
    if (probes.empty()) throw InputError("no dev passage yields two probe questions");
    const VarianceMode mode = c.variance_mode == "pooled" ? VarianceMode::pooled : VarianceMode::token;
    const VarianceProfile vt = passage_variance_profile(full_probe(teacher), probes, mode);
    const VarianceProfile vs = passage_variance_profile(deformer_probe(student), probes, mode);
    std::vector<QaPairRef> sample;
    for (const PassageQuestions& p : probes) {
      for (const auto& q : p.questions) sample.push_back({q, p.passage});
    }
    const DistanceMetric metric = c.metric == "cosine" ? DistanceMetric::cosine : DistanceMetric::euclidean;
    const DivergenceProfile div = divergence_profile(full_probe(teacher), deformer_probe(student), sample, metric);
    write_variance_profile(s.path("reports/variance_teacher.jsonl"), vt);
    write_variance_profile(s.path("reports/variance_student.jsonl"), vs);
    write_divergence_profile(s.path("reports/divergence.jsonl"), div);

    Table table({"layer", "teacher var", "student var", "question dist", "passage dist"});
    for (std::size_t l = 0; l <= mc.n_layers; ++l) {
      table.add({std::to_string(l), fixed(vt.raw[l], 6), fixed(vs.raw[l], 6), fixed(div.question[l], 4),
                 fixed(div.passage[l], 4)});
    }
    std::ostringstream text;
    text << probes.size() << " passages, " << vt.questions << " questions, " << c.variance_mode << " mode, "
         << c.metric << " distance\n"
         << table.render() << "teacher variance  " << sparkline(vt.raw) << "\n"
         << "student variance  " << sparkline(vs.raw) << "\n"
         << "passage distance  " << sparkline(div.passage) << "\n"
         << "question distance " << sparkline(div.question) << "\n"
         << "mean upper-layer passage distance: " << fixed(mean_over(div.passage, c.k + 1), 4) << "\n"
         << "skipped tokens: teacher " << vt.skipped_tokens << ", student " << vs.skipped_tokens << "\n";
    std::cout << text.str();
    write_text(s.path("reports/analysis.txt"), text.str());
    return std::vector<std::string>{"reports/variance_teacher.jsonl", "reports/variance_student.jsonl",
                                    "reports/divergence.jsonl", "reports/analysis.txt"};
  });
}

const std::vector<std::string>& default_pipeline() {
  static const std::vector<std::string> stages{"data", "teacher", "decompose", "finetune",
                                               "cache", "eval", "profile", "analyze"};
  return stages;
}

void pipeline(const RunConfig& c) {
  const std::vector<std::string> order{"data", "teacher", "decompose", "finetune", "tune",
                                       "cache", "eval", "profile", "cost", "analyze"};
  const std::vector<std::string>& stages = c.stages.empty() ? default_pipeline() : c.stages;
  std::size_t last = 0;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto it = std::find(order.begin(), order.end(), stages[i]);
    if (it == order.end()) throw ConfigurationError("unknown stage '" + stages[i] + "'");
    const auto pos = static_cast<std::size_t>(it - order.begin());
    if (i > 0 && pos <= last) throw ConfigurationError("stage '" + stages[i] + "' is out of dependency order");
    last = pos;
  }
  for (const std::string& stage : stages) {
    if (stage == "data") gen_data(c);
    else if (stage == "teacher") train_teacher(c);
    else if (stage == "decompose") decompose(c);
    else if (stage == "finetune") finetune(c);
    else if (stage == "tune") tune(c);
    else if (stage == "cache") encode_cache(c);
    else if (stage == "eval") eval(c);
    else if (stage == "profile") profile(c);
    else if (stage == "cost") cost(c);
    else if (stage == "analyze") analyze(c);
  }
}

}  // namespace deformer::cli
