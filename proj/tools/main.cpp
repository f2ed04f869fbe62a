#include <CLI11.hpp>
#include <iostream>

#include "deformer/errors.hpp"
#include "run_config.hpp"
#include "stages.hpp"

using deformer::cli::RunConfig;

namespace {

void add_options(CLI::App& app, RunConfig& c) {
  app.add_option("--run-dir", c.run_dir, "Directory holding every artifact and report");
  app.add_flag("--force", c.force, "Rebuild stages even when up to date");

  auto& d = c.data;
  app.add_option("--data-seed", d.seed, "Synthetic data seed");
  app.add_option("--n-keys", d.n_keys, "Distinct key tokens");
  app.add_option("--n-values", d.n_values, "Distinct value tokens");
  app.add_option("--n-fillers", d.n_fillers, "Distinct question filler tokens");
  app.add_option("--min-pairs", d.min_pairs, "Fewest key-value pairs per passage");
  app.add_option("--max-pairs", d.max_pairs, "Most key-value pairs per passage");
  app.add_option("--min-span", d.min_span, "Shortest value span");
  app.add_option("--max-span", d.max_span, "Longest value span");
  app.add_option("--max-question-fillers", d.max_question_fillers, "Most fillers before the question key");
  app.add_option("--train-total", d.train_total, "Training records before the tune split is carved out");
  app.add_option("--dev-size", d.dev, "Dev records");
  app.add_option("--tune-fraction", d.tune_fraction, "Share of training records moved to the tune split");

  app.add_option("--layers", c.layers, "Encoder layers n");
  app.add_option("--hidden", c.hidden, "Hidden width d");
  app.add_option("--heads", c.heads, "Attention heads");
  app.add_option("--ffn", c.ffn, "Feed-forward width");
  app.add_option("--init-std", c.init_std, "Initialiser standard deviation");
  app.add_option("--model-seed", c.model_seed, "Initialisation seed");
  app.add_option("--k", c.k, "Decomposition layer: layers 1..k are segment-local");

  app.add_option("--gamma", c.weights.gamma, "Task loss weight");
  app.add_option("--alpha", c.weights.alpha, "Distillation loss weight");
  app.add_option("--beta", c.weights.beta, "Layerwise similarity loss weight");
  app.add_flag("--lrs-from-split", c.lrs_from_split, "Include layer k in the similarity loss");

  app.add_option("--teacher-steps", c.teacher_steps, "Teacher training steps");
  app.add_option("--teacher-lr", c.teacher_lr, "Teacher learning rate");
  app.add_option("--finetune-steps", c.finetune_steps, "Fine-tuning steps");
  app.add_option("--finetune-lr", c.finetune_lr, "Fine-tuning learning rate");
  app.add_option("--batch", c.batch, "Examples per step");
  app.add_option("--warmup", c.warmup, "Linear warmup steps");
  app.add_option("--eval-interval", c.eval_interval, "Steps between dev evaluations (0: end only)");
  app.add_option("--eval-examples", c.eval_examples, "Dev examples used during training");
  app.add_option("--train-seed", c.train_seed, "Batch sampling seed");
  app.add_option("--max-span-len", c.max_span_len, "Longest predicted span");

  app.add_option("--precision", c.precision, "Cache storage precision: f32 or bf16");

  app.add_option("--tune-iterations", c.tune_iterations, "Bayesian optimisation trials");
  app.add_option("--tune-steps", c.tune_steps, "Fine-tuning steps per trial");
  app.add_option("--tune-seed", c.tune_seed, "Tuner seed");
  app.add_option("--tune-lo", c.tune_lo, "Lower bound for every loss weight");
  app.add_option("--tune-hi", c.tune_hi, "Upper bound for every loss weight");

  app.add_option("--probe-passages", c.probe_passages, "Passages in the analysis probe set");
  app.add_option("--probe-questions", c.probe_questions, "Questions per probe passage");
  app.add_option("--variance-mode", c.variance_mode, "token or pooled");
  app.add_option("--metric", c.metric, "euclidean or cosine");

  app.add_option("--profile-shape", c.profile_shape, "run, bert-base or bert-large");
  app.add_option("--profile-q-len", c.profile_q_len, "Question slots (0: shape default)");
  app.add_option("--profile-p-len", c.profile_p_len, "Passage tokens (0: shape default)");

  app.add_option("--gpu-price", c.cost.g_u, "Accelerator $ per hour");
  app.add_option("--sequences", c.cost.n_seq, "Sequences per month");
  app.add_option("--cost-batch", c.cost.b, "Sequences per batch");
  app.add_option("--batch-seconds", c.cost.t_b, "Seconds per batch, full model");
  app.add_option("--decomposed-batch-seconds", c.decomposed_batch_seconds, "Seconds per batch, decomposed model");
  app.add_option("--cached-gb", c.cost.s, "Cached representation size in GB");
  app.add_option("--storage-price", c.cost.s_u, "$ per GB-month");
  app.add_option("--read-price", c.cost.r_u, "$ per 10,000 reads");
  app.add_option("--storage-tokens", c.storage_tokens, "Tokens in the storage estimate");
  app.add_option("--storage-hidden", c.storage_hidden, "Hidden width in the storage estimate");
  app.add_option("--storage-bytes", c.storage_bytes, "Bytes per scalar in the storage estimate");

  app.add_option("--stages", c.stages, "Pipeline stages, comma separated")->delimiter(',');
}

int exit_code(const deformer::Error& e) {
  using namespace deformer;
  if (dynamic_cast<const DependencyError*>(&e)) return 4;
  if (dynamic_cast<const StaleArtifactError*>(&e)) return 5;
  if (dynamic_cast<const ConfigurationError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return 6;
  if (dynamic_cast<const NumericalError*>(&e)) return 7;
  if (dynamic_cast<const InputError*>(&e) || dynamic_cast<const FormatError*>(&e) ||
      dynamic_cast<const IoError*>(&e)) {
    return 3;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Decomposed transformer QA toolkit"};
  app.fallthrough();
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value file; any long flag name is a key, the command line wins");

  RunConfig cfg;
  add_options(app, cfg);

  struct Command {
    const char* name;
    const char* help;
    void (*run)(const RunConfig&);
  };
  const Command commands[] = {
      {"gen-data", "Generate the synthetic key-value QA dataset", deformer::cli::gen_data},
      {"train-teacher", "Train the full encoder on the task loss", deformer::cli::train_teacher},
      {"decompose", "Split the teacher at layer k", deformer::cli::decompose},
      {"finetune", "Fine-tune the decomposed model against the teacher", deformer::cli::finetune},
      {"encode-cache", "Precompute layer-k passage states into a cache file", deformer::cli::encode_cache},
      {"tune", "Search the loss weights with Bayesian optimisation", deformer::cli::tune},
      {"eval", "Exact match, span F1 and retention on the dev split", deformer::cli::eval},
      {"profile", "FLOPs, memory and speedup of full vs decomposed inference", deformer::cli::profile},
      {"cost", "Monthly serving cost and cache storage estimates", deformer::cli::cost},
      {"analyze", "Passage variance and layerwise divergence profiles", deformer::cli::analyze},
      {"pipeline", "Run the stages in dependency order", deformer::cli::pipeline},
  };
  for (const Command& c : commands) app.add_subcommand(c.name, c.help);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    for (const Command& c : commands) {
      if (app.got_subcommand(c.name)) c.run(cfg);
    }
  } catch (const deformer::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
