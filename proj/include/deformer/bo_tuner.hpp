#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "deformer/training.hpp"

namespace deformer {

/// Gaussian-process Bayesian optimisation (maximisation) over a box.
///
/// Surrogate: zero-mean GP on inputs scaled to [0, 1]^D and standardised
/// outputs, ARD squared-exponential kernel
///   k(x, x') = s2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_d^2)
/// with observation noise 1e-6 (relative to s2). Each l_d is chosen from
/// kLengthscaleGrid by maximising the marginal likelihood, with s2 profiled
/// out in closed form. Acquisition: expected improvement, maximised by
/// compass search started from the best of 256 seeded uniform points. The
/// first 10 trials are a seeded Latin hypercube.
struct BoOptions {
  std::size_t initial_design = 10;
  std::size_t acquisition_samples = 256;
  std::size_t local_starts = 8;
  double noise = 1e-6;
  double exploration = 0.01;  // EI margin, in standardised units
  std::vector<double> lengthscale_grid{0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.2, 2.0};
};

struct Trial {
  std::size_t iteration = 0;
  std::vector<double> x;
  double value = 0.0;
  bool failed = false;  // objective returned a non-finite value
};

struct SearchResult {
  std::vector<Trial> trials;
  std::size_t best = 0;  // index into trials of the best successful trial
  bool has_best = false;
  const Trial& best_trial() const { return trials.at(best); }
};

using Objective = std::function<double(const std::vector<double>&)>;

// Throws ParameterError when a bound is empty or inverted, or when
// n_iterations is smaller than the initial design.
SearchResult bo_maximize(const Objective& f, const std::vector<double>& lo, const std::vector<double>& hi,
                         std::size_t n_iterations, std::uint64_t seed, const BoOptions& options = {});

// Uniform random search with the same budget, for comparison.
SearchResult random_search(const Objective& f, const std::vector<double>& lo, const std::vector<double>& hi,
                           std::size_t n_iterations, std::uint64_t seed);

// Expected improvement over `best` for a Gaussian prediction (mean, sd).
double expected_improvement(double mean, double sd, double best, double margin = 0.0);

struct TuneBounds {
  double lo = 0.1;
  double hi = 2.0;
};

struct TuneTrial {
  LossWeights weights;
  double objective = 0.0;
  std::size_t iteration = 0;
  bool failed = false;
};

struct TuneResult {
  TuneTrial best;
  std::vector<TuneTrial> trials;
};

// Searches (gamma, alpha, beta) in [lo, hi]^3 for the largest objective.
TuneResult bo_tune(const std::function<double(const LossWeights&)>& objective, TuneBounds bounds,
                   std::size_t n_iterations, std::uint64_t seed, const BoOptions& options = {});

// One JSON object per line: iteration, gamma, alpha, beta, objective, failed.
void write_trials(const std::filesystem::path& path, const std::vector<TuneTrial>& trials);

}  // namespace deformer
