#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "deformer/dataset.hpp"
#include "deformer/encoder.hpp"
#include "deformer/metering.hpp"
#include "deformer/training.hpp"

namespace deformer::cli {

struct RunConfig {
  std::filesystem::path run_dir = "run";
  bool force = false;

  SyntheticTaskSpec data;

  std::size_t layers = 4;
  std::size_t hidden = 32;
  std::size_t heads = 4;
  std::size_t ffn = 64;
  double init_std = 0.2;
  std::uint64_t model_seed = 3;

  std::size_t k = 2;
  LossWeights weights;
  bool lrs_from_split = false;

  std::size_t teacher_steps = 3000;
  double teacher_lr = 1e-3;
  std::size_t finetune_steps = 3000;
  double finetune_lr = 1e-3;
  std::size_t batch = 16;
  std::size_t warmup = 100;
  std::size_t eval_interval = 500;
  std::size_t eval_examples = 200;
  std::uint64_t train_seed = 1;
  std::size_t max_span_len = kDefaultMaxSpanLen;

  std::string precision = "f32";

  std::size_t tune_iterations = 20;
  std::size_t tune_steps = 500;
  std::uint64_t tune_seed = 1;
  double tune_lo = 0.1;
  double tune_hi = 2.0;

  std::size_t probe_passages = 100;
  std::size_t probe_questions = 5;
  std::string variance_mode = "token";
  std::string metric = "euclidean";

  std::string profile_shape = "run";
  std::size_t profile_q_len = 0;  // 0: the shape's question slots
  std::size_t profile_p_len = 0;  // 0: the shape's passage capacity

  CostParams cost;
  double decomposed_batch_seconds = 1.4;
  std::size_t storage_tokens = 150;
  std::size_t storage_hidden = 768;
  std::size_t storage_bytes = 2;

  std::vector<std::string> stages;

  // Throws ConfigurationError on an inconsistent configuration.
  void validate() const;
  ModelConfig model_config(std::size_t vocab_size) const;
  TrainOptions teacher_options() const;
  TrainOptions finetune_options() const;
  StoragePrecision storage() const;
  LrsLayers lrs_layers() const { return lrs_from_split ? LrsLayers::from_split : LrsLayers::upper; }
};

}  // namespace deformer::cli
