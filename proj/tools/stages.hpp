#pragma once

#include <string>
#include <vector>

#include "run_config.hpp"

namespace deformer::cli {

void gen_data(const RunConfig& cfg);
void train_teacher(const RunConfig& cfg);
void decompose(const RunConfig& cfg);
void finetune(const RunConfig& cfg);
void encode_cache(const RunConfig& cfg);
void tune(const RunConfig& cfg);
void eval(const RunConfig& cfg);
void profile(const RunConfig& cfg);
void cost(const RunConfig& cfg);
void analyze(const RunConfig& cfg);

// data, teacher, decompose, finetune, cache, eval, profile, analyze
const std::vector<std::string>& default_pipeline();
// Runs the named stages in dependency order. Throws ConfigurationError on an
// unknown name or an out-of-order list.
void pipeline(const RunConfig& cfg);

}  // namespace deformer::cli
