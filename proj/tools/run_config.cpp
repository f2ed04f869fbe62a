#include "run_config.hpp"

#include "deformer/cache_entry.hpp"
#include "deformer/errors.hpp"

namespace deformer::cli {

void RunConfig::validate() const {
  data.validate();
  if (k > layers) throw ConfigurationError("k (" + std::to_string(k) + ") exceeds layers (" + std::to_string(layers) + ")");
  if (heads == 0 || hidden % heads != 0) throw ConfigurationError("hidden must be a multiple of heads");
  if (batch == 0) throw ConfigurationError("batch must be positive");
  if (variance_mode != "token" && variance_mode != "pooled") {
    throw ConfigurationError("variance-mode must be token or pooled");
  }
  if (metric != "euclidean" && metric != "cosine") throw ConfigurationError("metric must be euclidean or cosine");
  if (profile_shape != "run" && profile_shape != "bert-base" && profile_shape != "bert-large") {
    throw ConfigurationError("profile-shape must be run, bert-base or bert-large");
  }
  if (!(tune_lo > 0.0 && tune_lo < tune_hi)) throw ConfigurationError("tune bounds must satisfy 0 < lo < hi");
  (void)storage();
  (void)model_config(kReservedTokens + 1);
}

ModelConfig RunConfig::model_config(std::size_t vocab_size) const {
  ModelConfig c;
  c.n_layers = layers;
  c.hidden_dim = hidden;
  c.n_heads = heads;
  c.ffn_dim = ffn;
  c.vocab_size = vocab_size;
  c.q_max = data.max_question_len();
  c.p_max = data.max_passage_len();
  c.max_positions = c.q_max + c.p_max + 3;
  c.init_std = init_std;
  c.seed = model_seed;
  c.validate();
  return c;
}

TrainOptions RunConfig::teacher_options() const {
  TrainOptions o;
  o.steps = teacher_steps;
  o.batch_size = batch;
  o.eval_interval = eval_interval;
  o.eval_examples = eval_examples;
  o.max_span_len = max_span_len;
  o.seed = train_seed;
  o.adam.learning_rate = teacher_lr;
  o.adam.warmup_steps = warmup;
  return o;
}

TrainOptions RunConfig::finetune_options() const {
  TrainOptions o = teacher_options();
  o.steps = finetune_steps;
  o.adam.learning_rate = finetune_lr;
  return o;
}

StoragePrecision RunConfig::storage() const {
  const StoragePrecision p = storage_precision_from_string(precision);
  if (p == StoragePrecision::exact) throw ConfigurationError("precision must be f32 or bf16");
  return p;
}

}  // namespace deformer::cli
