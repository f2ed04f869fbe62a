#include "deformer/bo_tuner.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <limits>
#include <numbers>
#include <random>

#include "deformer/binary_io.hpp"
#include "deformer/errors.hpp"

namespace deformer {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void check_bounds(const std::vector<double>& lo, const std::vector<double>& hi) {
  if (lo.empty() || lo.size() != hi.size()) throw ParameterError("bounds must be non-empty and of equal length");
  for (std::size_t d = 0; d < lo.size(); ++d) {
    if (!(lo[d] < hi[d])) throw ParameterError("bound " + std::to_string(d) + " has lo >= hi");
  }
}

std::vector<double> to_box(const std::vector<double>& u, const std::vector<double>& lo, const std::vector<double>& hi) {
  std::vector<double> x(u.size());
  for (std::size_t d = 0; d < u.size(); ++d) x[d] = std::clamp(lo[d] + u[d] * (hi[d] - lo[d]), lo[d], hi[d]);
  return x;
}

std::vector<std::vector<double>> latin_hypercube(std::size_t n, std::size_t dims, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> pts(n, std::vector<double>(dims));
  for (std::size_t d = 0; d < dims; ++d) {
    std::vector<std::size_t> strata(n);
    for (std::size_t i = 0; i < n; ++i) strata[i] = i;
    std::shuffle(strata.begin(), strata.end(), rng);
    for (std::size_t i = 0; i < n; ++i) pts[i][d] = (static_cast<double>(strata[i]) + u(rng)) / static_cast<double>(n);
  }
  return pts;
}

double correlation(const std::vector<double>& a, const std::vector<double>& b, const std::vector<double>& ls) {
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) {
    const double z = (a[d] - b[d]) / ls[d];
    s += z * z;
  }
  return std::exp(-0.5 * s);
}

class Surrogate {
 public:
  Surrogate(std::vector<std::vector<double>> x, std::vector<double> y, const BoOptions& o)
      : x_(std::move(x)), noise_(o.noise) {
    const auto n = static_cast<Eigen::Index>(y.size());
    double mean = 0.0;
    for (double v : y) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : y) var += (v - mean) * (v - mean);
    const double sd = n > 1 ? std::sqrt(var / static_cast<double>(n - 1)) : 0.0;
    mean_ = mean;
    scale_ = sd > 0.0 ? sd : 1.0;
    y_ = VectorXd(n);
    for (Eigen::Index i = 0; i < n; ++i) y_[i] = (y[static_cast<std::size_t>(i)] - mean_) / scale_;
    fit(o.lengthscale_grid);
  }

  // Posterior mean and standard deviation in standardised units.
  std::pair<double, double> predict(const std::vector<double>& u) const {
    const auto n = static_cast<Eigen::Index>(x_.size());
    VectorXd r(n);
    for (Eigen::Index i = 0; i < n; ++i) r[i] = correlation(u, x_[static_cast<std::size_t>(i)], ls_);
    const double mean = r.dot(alpha_);
    const VectorXd v = llt_.matrixL().solve(r);
    const double var = signal_ * std::max(0.0, 1.0 - v.squaredNorm());
    return {mean, std::sqrt(var)};
  }

  double best_standardised() const { return y_.maxCoeff(); }
  const std::vector<double>& lengthscales() const { return ls_; }

 private:
  // Log marginal likelihood with the signal variance profiled out; -inf when
  // the correlation matrix is not positive definite.
  double profile(const std::vector<double>& ls, Eigen::LLT<MatrixXd>& llt, double& signal) const {
    const auto n = static_cast<Eigen::Index>(x_.size());
    MatrixXd r(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j <= i; ++j) {
        r(i, j) = r(j, i) = correlation(x_[static_cast<std::size_t>(i)], x_[static_cast<std::size_t>(j)], ls);
      }
      r(i, i) += noise_;
    }
    llt.compute(r);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    const VectorXd w = llt.matrixL().solve(y_);
    signal = std::max(w.squaredNorm() / static_cast<double>(n), 1e-300);
    double log_det = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) log_det += 2.0 * std::log(llt.matrixL()(i, i));
    return -0.5 * static_cast<double>(n) * std::log(signal) - 0.5 * log_det;
  }

  void fit(const std::vector<double>& grid) {
    const std::size_t dims = x_.front().size();
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::size_t> idx(dims, 0);
    while (true) {
      std::vector<double> ls(dims);
      for (std::size_t d = 0; d < dims; ++d) ls[d] = grid[idx[d]];
      Eigen::LLT<MatrixXd> llt;
      double signal = 0.0;
      const double ll = profile(ls, llt, signal);
      if (ll > best) {
        best = ll;
        ls_ = ls;
        llt_ = llt;
        signal_ = signal;
      }
      std::size_t d = 0;
      while (d < dims && ++idx[d] == grid.size()) idx[d++] = 0;
      if (d == dims) break;
    }
    if (!std::isfinite(best)) throw NumericalError("no lengthscale gives a positive definite surrogate");
    alpha_ = llt_.solve(y_);
  }

  std::vector<std::vector<double>> x_;
  VectorXd y_;
  VectorXd alpha_;
  Eigen::LLT<MatrixXd> llt_;
  std::vector<double> ls_;
  double noise_ = 1e-6;
  double signal_ = 1.0;
  double mean_ = 0.0;
  double scale_ = 1.0;
};

std::vector<double> compass_search(const std::function<double(const std::vector<double>&)>& g,
                                   std::vector<double> u, double value) {
  double step = 0.1;
  while (step > 1e-4) {
    bool moved = false;
    for (std::size_t d = 0; d < u.size() && !moved; ++d) {
      for (double dir : {1.0, -1.0}) {
        std::vector<double> c = u;
        c[d] = std::clamp(c[d] + dir * step, 0.0, 1.0);
        const double v = g(c);
        if (v > value) {
          u = std::move(c);
          value = v;
          moved = true;
          break;
        }
      }
    }
    if (!moved) step /= 2.0;
  }
  return u;
}

Trial run_trial(const Objective& f, std::size_t iteration, std::vector<double> x) {
  Trial t{iteration, std::move(x), 0.0, false};
  t.value = f(t.x);
  t.failed = !std::isfinite(t.value);
  return t;
}

void finish(SearchResult& r) {
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    if (r.trials[i].failed) continue;
    if (!r.has_best || r.trials[i].value > r.trials[r.best].value) {
      r.best = i;
      r.has_best = true;
    }
  }
}

}  // namespace

double expected_improvement(double mean, double sd, double best, double margin) {
  const double gain = mean - best - margin;
  if (sd <= 0.0) return std::max(gain, 0.0);
  const double z = gain / sd;
  const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
  const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
  return gain * cdf + sd * pdf;
}

SearchResult bo_maximize(const Objective& f, const std::vector<double>& lo, const std::vector<double>& hi,
                         std::size_t n_iterations, std::uint64_t seed, const BoOptions& options) {
  check_bounds(lo, hi);
  if (n_iterations < options.initial_design) {
    throw ParameterError("n_iterations must be at least the initial design size (" +
                         std::to_string(options.initial_design) + ")");
  }
  const std::size_t dims = lo.size();
  std::mt19937_64 rng(seed);
  SearchResult result;
  std::vector<std::vector<double>> unit;  // successful trials, scaled to [0, 1]
  std::vector<double> values;

  auto record = [&](const std::vector<double>& u) {
    Trial t = run_trial(f, result.trials.size(), to_box(u, lo, hi));
    if (!t.failed) {
      unit.push_back(u);
      values.push_back(t.value);
    }
    result.trials.push_back(std::move(t));
  };

  for (const auto& u : latin_hypercube(options.initial_design, dims, rng)) record(u);

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  while (result.trials.size() < n_iterations) {
    std::vector<std::vector<double>> candidates(options.acquisition_samples, std::vector<double>(dims));
    for (auto& c : candidates) {
      for (double& v : c) v = uni(rng);
    }
    if (unit.size() < 2) {
      record(candidates.front());
      continue;
    }
    const Surrogate gp(unit, values, options);
    const double best = gp.best_standardised();
    const auto acquisition = [&](const std::vector<double>& u) {
      const auto [m, s] = gp.predict(u);
      return expected_improvement(m, s, best, options.exploration);
    };
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < candidates.size(); ++i) scored.emplace_back(acquisition(candidates[i]), i);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    std::vector<double> chosen = candidates[scored.front().second];
    double chosen_value = scored.front().first;
    for (std::size_t s = 0; s < std::min(options.local_starts, scored.size()); ++s) {
      const std::vector<double> u = compass_search(acquisition, candidates[scored[s].second], scored[s].first);
      const double v = acquisition(u);
      if (v > chosen_value) {
        chosen = u;
        chosen_value = v;
      }
    }
    record(chosen);
  }
  finish(result);
  return result;
}

SearchResult random_search(const Objective& f, const std::vector<double>& lo, const std::vector<double>& hi,
                           std::size_t n_iterations, std::uint64_t seed) {
  check_bounds(lo, hi);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  SearchResult result;
  for (std::size_t i = 0; i < n_iterations; ++i) {
    std::vector<double> u(lo.size());
    for (double& v : u) v = uni(rng);
    result.trials.push_back(run_trial(f, i, to_box(u, lo, hi)));
  }
  finish(result);
  return result;
}

TuneResult bo_tune(const std::function<double(const LossWeights&)>& objective, TuneBounds bounds,
                   std::size_t n_iterations, std::uint64_t seed, const BoOptions& options) {
  const auto as_weights = [](const std::vector<double>& x) { return LossWeights{x[0], x[1], x[2]}; };
  const SearchResult r = bo_maximize([&](const std::vector<double>& x) { return objective(as_weights(x)); },
                                     std::vector<double>(3, bounds.lo), std::vector<double>(3, bounds.hi),
                                     n_iterations, seed, options);
  TuneResult out;
  for (const Trial& t : r.trials) out.trials.push_back({as_weights(t.x), t.value, t.iteration, t.failed});
  if (!r.has_best) throw NumericalError("every tuning trial failed");
  out.best = out.trials[r.best];
  return out;
}

void write_trials(const std::filesystem::path& path, const std::vector<TuneTrial>& trials) {
  std::string text;
  for (const TuneTrial& t : trials) {
    nlohmann::ordered_json j;
    j["iteration"] = t.iteration;
    j["gamma"] = t.weights.gamma;
    j["alpha"] = t.weights.alpha;
    j["beta"] = t.weights.beta;
    j["objective"] = t.failed ? nlohmann::json(nullptr) : nlohmann::json(t.objective);
    j["failed"] = t.failed;
    text += j.dump() + "\n";
  }
  binary::write_file_atomic(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

}  // namespace deformer
