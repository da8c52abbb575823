#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace pcbmerge {

// Higher is better throughout.
using Fitness = std::function<double(std::span<const double>)>;

struct SearchSpace {
  std::size_t dim = 1;
  double lower = 0.8;
  double upper = 2.5;

  void validate() const;
};

struct FitnessReport {
  std::vector<double> best_params;
  double best_fitness = -HUGE_VAL;
  // Distinct fitness invocations (cache hits excluded).
  std::size_t evaluations_used = 0;
  // Samples drawn, including cache hits; never exceeds the budget.
  std::size_t samples_drawn = 0;
  std::vector<std::pair<std::vector<double>, double>> history;
};

// Evaluates each candidate replicated to `dim` coordinates and returns the
// best; equal fitness prefers the smaller candidate.
FitnessReport grid_search(std::span<const double> candidates, std::size_t dim, const Fitness& fitness);

// lo, lo + step, ... up to hi inclusive (values rounded to 1e-10).
std::vector<double> grid_candidates(double lower, double upper, double step);

// State of a (mu/mu_w, lambda)-CMA-ES with the canonical default strategy
// parameters: log-decreasing weights over the better half, cumulative
// step-size adaptation, rank-one and rank-mu covariance updates.
struct CmaState {
  SearchSpace space;
  Eigen::VectorXd mean;
  double sigma = 0.0;
  Eigen::MatrixXd covariance;
  Eigen::VectorXd path_sigma;
  Eigen::VectorXd path_c;
  std::size_t generation = 0;
  std::size_t population_size = 0;

  // strategy parameters
  std::size_t mu = 0;
  Eigen::VectorXd weights;
  double mu_eff = 0.0;
  double c_sigma = 0.0;
  double d_sigma = 0.0;
  double c_c = 0.0;
  double c1 = 0.0;
  double c_mu = 0.0;
  double chi_n = 0.0;

  // covariance = basis * diag(axis^2) * basis^T
  Eigen::MatrixXd basis;
  Eigen::VectorXd axis;

  std::mt19937_64 rng;
};

std::size_t default_population_size(std::size_t dim);

// Mean at the box centre, sigma = 0.2 * (upper - lower), identity covariance.
CmaState cma_init(const SearchSpace& space, std::uint64_t seed,
                  std::optional<std::size_t> population_size = std::nullopt);

// Draws population_size points from N(mean, sigma^2 C), clipped into the box.
std::vector<std::vector<double>> cma_ask(CmaState& state);

// Ranks by fitness (descending) and advances the distribution one generation.
void cma_tell(CmaState& state, std::span<const std::vector<double>> samples, std::span<const double> fitnesses);

struct SearchOptions {
  std::optional<std::size_t> population_size;
  // Distinct evaluations of one generation may run on this many threads.
  std::size_t workers = 1;
};

// Ask/tell until `budget` samples are drawn. Fitness is evaluated at sample
// coordinates rounded to 4 decimals and cached on that key.
FitnessReport cma_search(const SearchSpace& space, const Fitness& fitness, std::size_t budget,
                         std::uint64_t seed, const SearchOptions& options = {});

}  // namespace pcbmerge
