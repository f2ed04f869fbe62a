#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "deformer/cache_store.hpp"
#include "deformer/dataset.hpp"
#include "deformer/decomposed.hpp"
#include "deformer/encoder.hpp"

namespace deformer {

struct LossWeights {
  double gamma = 0.7;  // task
  double alpha = 1.1;  // distillation
  double beta = 0.5;   // layerwise representation similarity

  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct LossBreakdown {
  double l_ts = 0.0;
  double l_kd = 0.0;
  double l_lrs = 0.0;
  double l_total = 0.0;
};

/// Which joint layers the representation loss compares: `upper` is k+1..n,
/// `from_split` also includes layer k.
enum class LrsLayers { upper, from_split };

// -(ln p_start[gold.start] + ln p_end[gold.end]) / 2. Throws InputError if the
// gold span leaves the valid passage slots.
double task_loss(const PredictionDistribution& pred, Span gold);

// KL(a || b) summed over the start and end distributions. Throws InputError
// when the two distributions cover different slots.
double kd_loss(const PredictionDistribution& a, const PredictionDistribution& b, double floor = 1e-12);

// Sum of squared distances between rows flagged in `valid`, over the layers
// selected by `layers`. Throws ShapeError on mismatched stacks.
double lrs_loss(const HiddenStack& student, const HiddenStack& teacher, std::size_t k,
                std::span<const std::uint8_t> valid, LrsLayers layers = LrsLayers::upper);

// Throws NumericalError on a non-finite part.
LossBreakdown total_loss(const LossWeights& weights, double l_ts, double l_kd, double l_lrs);

// Differentiable versions of the above.
Var task_loss(const SpanProbabilities& probs, const SegmentPair& pair, Span gold);
Var kd_loss(const SpanProbabilities& student, const PredictionDistribution& teacher, double floor = 1e-12);
// `joint` holds layers k..n as produced by deformer_graph.
Var lrs_loss(std::span<const Var> joint, const HiddenStack& teacher, std::size_t k, const std::vector<std::uint8_t>& valid,
             LrsLayers layers = LrsLayers::upper);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t warmup_steps = 100;  // linear ramp, then constant
  double clip_norm = 1.0;          // global gradient norm; 0 disables
};

class Adam {
 public:
  Adam(std::vector<Tensor*> params, AdamOptions options);

  // Applies one update from `grads` (same order as the parameters) and
  // returns the pre-clip global gradient norm.
  double step(const std::vector<Tensor>& grads);
  std::size_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  AdamOptions options_;
  std::size_t t_ = 0;
};

struct TrainOptions {
  std::size_t steps = 3000;
  std::size_t batch_size = 16;  // at least the training set size: every example, every step
  std::size_t eval_interval = 250;  // 0 evaluates only at the end
  std::size_t eval_examples = 200;  // taken from the front of the eval set
  std::size_t max_span_len = kDefaultMaxSpanLen;
  std::uint64_t seed = 1;
  AdamOptions adam;
};

struct HistoryRecord {
  std::size_t step = 0;
  LossBreakdown loss;              // mean over the step's batch
  std::optional<double> exact_match;  // percent, on eval steps
};

struct TeacherResult {
  EncoderWeights weights;
  std::vector<HistoryRecord> history;
};

struct FineTuneResult {
  DeformerModel model;
  std::vector<HistoryRecord> history;
};

/// Adam on the task loss of the full encoder. The returned weights are
/// rounded to f32 so that a checkpoint reproduces them exactly. Throws
/// InputError on an empty training set and NumericalError naming the step on
/// divergence.
TeacherResult train_teacher(const std::vector<Example>& train, const std::vector<Example>& eval,
                            const ModelConfig& config, const TrainOptions& options);
// Continues from `init`.
TeacherResult train_teacher(const std::vector<Example>& train, const std::vector<Example>& eval,
                            EncoderWeights init, const TrainOptions& options);

/// Minimises gamma*L_ts + alpha*L_kd + beta*L_lrs for the student against a
/// frozen teacher. Throws ConfigurationError if the two configs differ.
FineTuneResult fine_tune(const DeformerModel& student, const EncoderWeights& teacher,
                         const std::vector<Example>& train, const std::vector<Example>& eval,
                         const LossWeights& weights, const TrainOptions& options,
                         LrsLayers lrs_layers = LrsLayers::upper);

// Mean loss of one example at the current parameters, without training.
LossBreakdown example_loss(const DeformerModel& student, const EncoderWeights& teacher, const Example& example,
                           const LossWeights& weights, LrsLayers lrs_layers = LrsLayers::upper);

// Passages are quantised with `inline_storage` at layer k, as in deformer_forward.
SpanPredictor deformer_predictor(const DeformerModel& model, std::size_t max_span_len = kDefaultMaxSpanLen,
                                 StoragePrecision inline_storage = StoragePrecision::exact);
// Passages found in `cache` are served from it; others are encoded inline at
// the cache's precision, so hits and misses predict identically.
SpanPredictor cached_deformer_predictor(const DeformerModel& model, const CacheFile& cache,
                                        std::size_t max_span_len = kDefaultMaxSpanLen);

// One JSON object per line: step, l_ts, l_kd, l_lrs, l_total and em (when present).
void write_history(const std::filesystem::path& path, const std::vector<HistoryRecord>& history);
std::vector<HistoryRecord> read_history(const std::filesystem::path& path);

}  // namespace deformer
