#include "deformer/training.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"

namespace deformer {

namespace {

void check_gold(std::size_t passage_len, Span gold) {
  if (gold.start > gold.end || gold.end >= passage_len) {
    throw InputError("gold span (" + std::to_string(gold.start) + ", " + std::to_string(gold.end) +
                     ") lies outside the " + std::to_string(passage_len) + " valid passage slots");
  }
}

void check_same_support(const PredictionDistribution& a, const PredictionDistribution& b) {
  if (a.start.size() != b.start.size() || a.end.size() != b.end.size() || a.passage_offset != b.passage_offset ||
      a.passage_len != b.passage_len) {
    throw InputError("distributions cover different slots");
  }
}

double kl(const std::vector<double>& p, const std::vector<double>& q, double floor) {
  double out = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) out += p[i] * std::log(p[i] / std::max(q[i], floor));
  }
  return out;
}

std::size_t first_lrs_layer(std::size_t k, LrsLayers layers) { return layers == LrsLayers::upper ? k + 1 : k; }

Tensor column(const std::vector<double>& v) { return Tensor({v.size(), 1}, v); }

}  // namespace

double task_loss(const PredictionDistribution& pred, Span gold) {
  check_gold(pred.passage_len, gold);
  const double ps = pred.start.at(pred.passage_offset + gold.start);
  const double pe = pred.end.at(pred.passage_offset + gold.end);
  return -(std::log(ps) + std::log(pe)) / 2.0;
}

double kd_loss(const PredictionDistribution& a, const PredictionDistribution& b, double floor) {
  check_same_support(a, b);
  return kl(a.start, b.start, floor) + kl(a.end, b.end, floor);
}

double lrs_loss(const HiddenStack& student, const HiddenStack& teacher, std::size_t k,
                std::span<const std::uint8_t> valid, LrsLayers layers) {
  if (student.last_layer() != teacher.last_layer()) throw ShapeError("student and teacher stacks differ in depth");
  const std::size_t n = teacher.last_layer();
  if (k >= n && layers == LrsLayers::upper) return 0.0;
  double out = 0.0;
  for (std::size_t l = first_lrs_layer(k, layers); l <= n; ++l) {
    const Tensor& s = student.layer(l);
    const Tensor& t = teacher.layer(l);
    if (!s.same_shape(t) || s.rows() != valid.size()) {
      throw ShapeError("layer " + std::to_string(l) + ": " + s.shape_string() + " vs " + t.shape_string());
    }
    for (std::size_t r = 0; r < s.rows(); ++r) {
      if (!valid[r]) continue;
      for (std::size_t c = 0; c < s.cols(); ++c) {
        const double diff = s(r, c) - t(r, c);
        out += diff * diff;
      }
    }
  }
  return out;
}

LossBreakdown total_loss(const LossWeights& w, double l_ts, double l_kd, double l_lrs) {
  if (!std::isfinite(l_ts) || !std::isfinite(l_kd) || !std::isfinite(l_lrs)) {
    throw NumericalError("non-finite loss component");
  }
  return {l_ts, l_kd, l_lrs, w.gamma * l_ts + w.alpha * l_kd + w.beta * l_lrs};
}

Var task_loss(const SpanProbabilities& probs, const SegmentPair& pair, Span gold) {
  check_gold(pair.passage_len, gold);
  const Var ls = log(pick(probs.start, pair.passage_offset() + gold.start));
  const Var le = log(pick(probs.end, pair.passage_offset() + gold.end));
  return scale(add(ls, le), -0.5);
}

Var kd_loss(const SpanProbabilities& student, const PredictionDistribution& teacher, double floor) {
  if (student.start.value().size() != teacher.start.size() || student.end.value().size() != teacher.end.size()) {
    throw InputError("distributions cover different slots");
  }
  return add(kl_divergence(student.start, column(teacher.start), floor),
             kl_divergence(student.end, column(teacher.end), floor));
}

Var lrs_loss(std::span<const Var> joint, const HiddenStack& teacher, std::size_t k,
             const std::vector<std::uint8_t>& valid, LrsLayers layers) {
  if (joint.empty()) throw ShapeError("no joint layers");
  const std::size_t n = k + joint.size() - 1;
  if (n != teacher.last_layer()) throw ShapeError("student and teacher stacks differ in depth");
  Var out = scale(sum(joint.front()), 0.0);
  for (std::size_t l = first_lrs_layer(k, layers); l <= n; ++l) {
    const Var s = joint[l - k];
    if (!s.value().same_shape(teacher.layer(l))) throw ShapeError("layer " + std::to_string(l) + " shapes differ");
    out = add(out, squared_distance(s, teacher.layer(l), valid));
  }
  return out;
}

Adam::Adam(std::vector<Tensor*> params, AdamOptions options) : params_(std::move(params)), options_(options) {
  for (const Tensor* p : params_) {
    m_.emplace_back(p->shape(), 0.0);
    v_.emplace_back(p->shape(), 0.0);
  }
}

double Adam::step(const std::vector<Tensor>& grads) {
  if (grads.size() != params_.size()) throw ShapeError("gradient count does not match parameter count");
  double sq = 0.0;
  for (const Tensor& g : grads) {
    for (double x : g.data()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericalError("non-finite gradient norm");
  const double clip = options_.clip_norm > 0.0 && norm > options_.clip_norm ? options_.clip_norm / norm : 1.0;
  ++t_;
  const double warm = options_.warmup_steps == 0
                          ? 1.0
                          : std::min(1.0, static_cast<double>(t_) / static_cast<double>(options_.warmup_steps));
  const double lr = options_.learning_rate * warm;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i]->data();
    auto m = m_[i].data();
    auto v = v_[i].data();
    const auto g = grads[i].data();
    if (g.size() != p.size()) throw ShapeError("gradient shape does not match parameter");
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * clip;
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * gj;
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * gj * gj;
      p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + options_.epsilon);
    }
  }
  return norm;
}

namespace {

void accumulate(std::vector<Tensor>& acc, const Gradients& grads, const std::vector<Var>& vars, double weight) {
  for (std::size_t i = 0; i < vars.size(); ++i) {
    const auto g = grads.of(vars[i]).data();
    auto a = acc[i].data();
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += weight * g[j];
  }
}

std::vector<Tensor> zero_like(const EncoderWeights& w) {
  std::vector<Tensor> out;
  for (const Tensor* t : w.parameters()) out.emplace_back(t->shape(), 0.0);
  return out;
}

void add_into(LossBreakdown& acc, const LossBreakdown& x, double weight) {
  acc.l_ts += weight * x.l_ts;
  acc.l_kd += weight * x.l_kd;
  acc.l_lrs += weight * x.l_lrs;
  acc.l_total += weight * x.l_total;
}

std::vector<std::size_t> sample_batch(std::mt19937_64& rng, std::size_t n, std::size_t batch) {
  if (batch >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  std::uniform_int_distribution<std::size_t> pick_index(0, n - 1);
  std::vector<std::size_t> out(batch);
  for (std::size_t& i : out) i = pick_index(rng);
  return out;
}

std::vector<Example> eval_slice(const std::vector<Example>& eval, std::size_t count) {
  return {eval.begin(), eval.begin() + static_cast<std::ptrdiff_t>(std::min(count, eval.size()))};
}

bool is_eval_step(const TrainOptions& o, std::size_t step) {
  return step == o.steps || (o.eval_interval > 0 && step % o.eval_interval == 0);
}

void check_loss(const LossBreakdown& loss, std::size_t step) {
  if (!std::isfinite(loss.l_total)) throw NumericalError("loss diverged at step " + std::to_string(step));
}

// Loss and gradients of the student on one example; the teacher pass is
// value-only.
LossBreakdown student_example(const DeformerModel& student, const EncoderWeights& teacher, const Example& e,
                              const LossWeights& weights, LrsLayers lrs_layers, std::vector<Tensor>* acc,
                              double weight) {
  const std::size_t k = student.split_layer;
  const SegmentPair teacher_pair = pack_pair(e.question, e.passage, teacher.config);
  const HiddenStack teacher_stack = encode_full(teacher_pair, teacher);
  const PredictionDistribution teacher_pred = qa_head(teacher_stack, teacher_pair, teacher);

  Tape tape;
  const BoundWeights w = bind_weights(tape, student.weights, acc != nullptr);
  const DeformerGraph g = deformer_graph(w, e.question, e.passage, k);
  const Var ts = task_loss(g.probs, g.pair, e.answer);
  const Var kd = kd_loss(g.probs, teacher_pred);
  const Var lrs = lrs_loss(g.upper, teacher_stack, k, g.pair.valid, lrs_layers);
  const Var total = add(add(scale(ts, weights.gamma), scale(kd, weights.alpha)), scale(lrs, weights.beta));
  const LossBreakdown out = total_loss(weights, ts.value()[0], kd.value()[0], lrs.value()[0]);
  if (acc != nullptr) accumulate(*acc, tape.backward(total), w.all, weight);
  return out;
}

}  // namespace

TeacherResult train_teacher(const std::vector<Example>& train, const std::vector<Example>& eval,
                            const ModelConfig& config, const TrainOptions& options) {
  return train_teacher(train, eval, EncoderWeights::initialize(config), options);
}

TeacherResult train_teacher(const std::vector<Example>& train, const std::vector<Example>& eval,
                            EncoderWeights init, const TrainOptions& options) {
  if (train.empty()) throw InputError("training set is empty");
  if (options.batch_size == 0) throw ParameterError("batch size must be positive");
  TeacherResult result{std::move(init), {}};
  if (options.steps == 0) return result;
  EncoderWeights& weights = result.weights;
  Adam adam(weights.parameters(), options.adam);
  std::mt19937_64 rng(options.seed);
  const std::vector<Example> eval_set = eval_slice(eval, options.eval_examples);
  const double share = 1.0 / static_cast<double>(std::min(options.batch_size, train.size()));

  for (std::size_t step = 1; step <= options.steps; ++step) {
    std::vector<Tensor> grads = zero_like(weights);
    LossBreakdown mean;
    for (std::size_t idx : sample_batch(rng, train.size(), options.batch_size)) {
      const Example& e = train[idx];
      const SegmentPair pair = pack_pair(e.question, e.passage, weights.config);
      Tape tape;
      const BoundWeights w = bind_weights(tape, weights, true);
      const std::vector<Var> stack = encode_graph(w, pair);
      const Var loss = task_loss(span_head(w, stack.back(), pair), pair, e.answer);
      const double l = loss.value()[0];
      add_into(mean, {l, 0.0, 0.0, l}, share);
      check_loss(mean, step);
      accumulate(grads, tape.backward(loss), w.all, share);
    }
    adam.step(grads);
    HistoryRecord rec{step, mean, std::nullopt};
    if (!eval_set.empty() && is_eval_step(options, step)) {
      rec.exact_match = evaluate(eval_set, full_model_predictor(weights, options.max_span_len)).exact_match;
    }
    result.history.push_back(rec);
  }
  weights.round_to_f32();
  return result;
}

FineTuneResult fine_tune(const DeformerModel& student, const EncoderWeights& teacher,
                         const std::vector<Example>& train, const std::vector<Example>& eval,
                         const LossWeights& weights, const TrainOptions& options, LrsLayers lrs_layers) {
  if (!(student.config() == teacher.config)) throw ConfigurationError("teacher and student configs differ");
  if (train.empty()) throw InputError("training set is empty");
  if (options.batch_size == 0) throw ParameterError("batch size must be positive");
  FineTuneResult result{student, {}};
  if (options.steps == 0) return result;
  DeformerModel& model = result.model;
  Adam adam(model.weights.parameters(), options.adam);
  std::mt19937_64 rng(options.seed);
  const std::vector<Example> eval_set = eval_slice(eval, options.eval_examples);
  const double share = 1.0 / static_cast<double>(std::min(options.batch_size, train.size()));

  for (std::size_t step = 1; step <= options.steps; ++step) {
    std::vector<Tensor> grads = zero_like(model.weights);
    LossBreakdown mean;
    for (std::size_t idx : sample_batch(rng, train.size(), options.batch_size)) {
      add_into(mean, student_example(model, teacher, train[idx], weights, lrs_layers, &grads, share), share);
    }
    check_loss(mean, step);
    adam.step(grads);
    HistoryRecord rec{step, mean, std::nullopt};
    if (!eval_set.empty() && is_eval_step(options, step)) {
      rec.exact_match = evaluate(eval_set, deformer_predictor(model, options.max_span_len)).exact_match;
    }
    result.history.push_back(rec);
  }
  model.weights.round_to_f32();
  return result;
}

LossBreakdown example_loss(const DeformerModel& student, const EncoderWeights& teacher, const Example& example,
                           const LossWeights& weights, LrsLayers lrs_layers) {
  if (!(student.config() == teacher.config)) throw ConfigurationError("teacher and student configs differ");
  return student_example(student, teacher, example, weights, lrs_layers, nullptr, 1.0);
}

SpanPredictor deformer_predictor(const DeformerModel& model, std::size_t max_span_len, StoragePrecision inline_storage) {
  return [&model, max_span_len, inline_storage](const Example& e) {
    return predict_span(deformer_forward(e.question, e.passage, model, inline_storage).prediction, max_span_len);
  };
}

SpanPredictor cached_deformer_predictor(const DeformerModel& model, const CacheFile& cache, std::size_t max_span_len) {
  return [&model, &cache, max_span_len](const Example& e) {
    const std::optional<CacheEntry> hit = cache.lookup(cache_key(e.passage, model));
    const DeformerOutput out = hit ? deformer_forward(e.question, *hit, model)
                                   : deformer_forward(e.question, e.passage, model, cache.header().precision);
    return predict_span(out.prediction, max_span_len);
  };
}

void write_history(const std::filesystem::path& path, const std::vector<HistoryRecord>& history) {
  std::string text;
  for (const HistoryRecord& r : history) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["l_ts"] = r.loss.l_ts;
    j["l_kd"] = r.loss.l_kd;
    j["l_lrs"] = r.loss.l_lrs;
    j["l_total"] = r.loss.l_total;
    if (r.exact_match) j["em"] = *r.exact_match;
    text += j.dump() + "\n";
  }
  binary::write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::vector<HistoryRecord> read_history(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<HistoryRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      HistoryRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.loss = {j.at("l_ts").get<double>(), j.at("l_kd").get<double>(), j.at("l_lrs").get<double>(),
                j.at("l_total").get<double>()};
      if (j.contains("em")) r.exact_match = j.at("em").get<double>();
      out.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace deformer
