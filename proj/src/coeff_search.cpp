#include "pcbmerge/coeff_search.hpp"

#include <algorithm>
#include <future>
#include <map>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "pcbmerge/error.hpp"

namespace pcbmerge {

namespace {

std::string format_params(std::span<const double> x) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < x.size(); ++i) os << (i ? ", " : "") << x[i];
  os << "]";
  return os.str();
}

// Calls `fitness`, tagging failures with the parameters that caused them.
double evaluate(const Fitness& fitness, std::span<const double> x) {
  double f;
  try {
    f = fitness(x);
  } catch (const Error& e) {
    const ErrorCode code = e.category() == ErrorCategory::Fitness ? e.code() : ErrorCode::FitnessFailure;
    throw Error(code, "fitness failed at " + format_params(x) + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::FitnessFailure, "fitness failed at " + format_params(x) + ": " + e.what());
  }
  if (!std::isfinite(f)) {
    fail(ErrorCode::NonFiniteFitness, "fitness returned a non-finite value at " + format_params(x));
  }
  return f;
}

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Box-Muller on the raw engine output, so draws do not depend on the
// standard library's distribution implementation.
double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

void refresh_eigensystem(CmaState& s) {
  // keep C exactly symmetric before decomposing
  Eigen::MatrixXd sym = 0.5 * (s.covariance + s.covariance.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
  Eigen::VectorXd values = solver.eigenvalues();
  const double floor = std::max(values.maxCoeff(), 1e-300) * 1e-14;
  for (Eigen::Index k = 0; k < values.size(); ++k) values[k] = std::max(values[k], floor);
  s.basis = solver.eigenvectors();
  s.axis = values.cwiseSqrt();
  const Eigen::MatrixXd rebuilt = s.basis * values.asDiagonal() * s.basis.transpose();
  s.covariance = 0.5 * (rebuilt + rebuilt.transpose());
}

std::vector<double> round4(std::span<const double> x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) r[i] = std::round(x[i] * 1e4) / 1e4;
  return r;
}

std::vector<long long> cache_key(std::span<const double> x) {
  std::vector<long long> k(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) k[i] = std::llround(x[i] * 1e4);
  return k;
}

}  // namespace

void SearchSpace::validate() const {
  if (dim < 1) fail(ErrorCode::InvalidArgument, "search dimension must be >= 1");
  if (!(std::isfinite(lower) && std::isfinite(upper) && lower < upper)) {
    fail(ErrorCode::InvalidArgument, "search range must satisfy lower < upper");
  }
}

std::vector<double> grid_candidates(double lower, double upper, double step) {
  if (!(step > 0.0) || !(lower <= upper)) fail(ErrorCode::InvalidArgument, "grid needs step > 0 and lower <= upper");
  const auto steps = static_cast<long long>(std::floor((upper - lower) / step + 1e-9));
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(steps + 1));
  for (long long k = 0; k <= steps; ++k) out.push_back(std::round((lower + k * step) * 1e10) / 1e10);
  return out;
}

FitnessReport grid_search(std::span<const double> candidates, std::size_t dim, const Fitness& fitness) {
  if (candidates.empty()) fail(ErrorCode::InvalidArgument, "grid search needs at least one candidate");
  if (dim < 1) fail(ErrorCode::InvalidArgument, "search dimension must be >= 1");
  FitnessReport report;
  double best_lambda = 0.0;
  for (double lambda : candidates) {
    std::vector<double> x(dim, lambda);
    const double f = evaluate(fitness, x);
    ++report.evaluations_used;
    ++report.samples_drawn;
    const bool better = report.best_params.empty() || f > report.best_fitness ||
                        (f == report.best_fitness && lambda < best_lambda);
    if (better) {
      report.best_fitness = f;
      report.best_params = x;
      best_lambda = lambda;
    }
    report.history.emplace_back(std::move(x), f);
  }
  return report;
}

std::size_t default_population_size(std::size_t dim) {
  return 4 + static_cast<std::size_t>(std::floor(3.0 * std::log(static_cast<double>(dim))));
}

CmaState cma_init(const SearchSpace& space, std::uint64_t seed, std::optional<std::size_t> population_size) {
  space.validate();
  const auto n = static_cast<Eigen::Index>(space.dim);
  const double nd = static_cast<double>(space.dim);

  CmaState s;
  s.space = space;
  s.mean = Eigen::VectorXd::Constant(n, 0.5 * (space.lower + space.upper));
  s.sigma = 0.2 * (space.upper - space.lower);
  s.covariance = Eigen::MatrixXd::Identity(n, n);
  s.basis = Eigen::MatrixXd::Identity(n, n);
  s.axis = Eigen::VectorXd::Ones(n);
  s.path_sigma = Eigen::VectorXd::Zero(n);
  s.path_c = Eigen::VectorXd::Zero(n);
  s.population_size = population_size.value_or(default_population_size(space.dim));
  if (s.population_size < 2) fail(ErrorCode::InvalidArgument, "CMA-ES population must be >= 2");
  s.rng.seed(seed);

  s.mu = s.population_size / 2;
  s.weights.resize(static_cast<Eigen::Index>(s.mu));
  for (std::size_t i = 0; i < s.mu; ++i) {
    s.weights[static_cast<Eigen::Index>(i)] = std::log(static_cast<double>(s.mu) + 0.5) - std::log(static_cast<double>(i + 1));
  }
  s.weights /= s.weights.sum();
  s.mu_eff = 1.0 / s.weights.squaredNorm();

  s.c_sigma = (s.mu_eff + 2.0) / (nd + s.mu_eff + 5.0);
  s.d_sigma = 1.0 + 2.0 * std::max(0.0, std::sqrt((s.mu_eff - 1.0) / (nd + 1.0)) - 1.0) + s.c_sigma;
  s.c_c = (4.0 + s.mu_eff / nd) / (nd + 4.0 + 2.0 * s.mu_eff / nd);
  s.c1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + s.mu_eff);
  s.c_mu = std::min(1.0 - s.c1, 2.0 * (s.mu_eff - 2.0 + 1.0 / s.mu_eff) / ((nd + 2.0) * (nd + 2.0) + s.mu_eff));
  s.chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));
  return s;
}

std::vector<std::vector<double>> cma_ask(CmaState& s) {
  const auto n = s.mean.size();
  std::vector<std::vector<double>> out;
  out.reserve(s.population_size);
  Eigen::VectorXd z(n);
  for (std::size_t k = 0; k < s.population_size; ++k) {
    for (Eigen::Index i = 0; i < n; ++i) z[i] = standard_normal(s.rng);
    const Eigen::VectorXd x = s.mean + s.sigma * (s.basis * s.axis.cwiseProduct(z));
    std::vector<double> v(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = std::clamp(x[i], s.space.lower, s.space.upper);
    out.push_back(std::move(v));
  }
  return out;
}

void cma_tell(CmaState& s, std::span<const std::vector<double>> samples, std::span<const double> fitnesses) {
  if (samples.size() != s.population_size || fitnesses.size() != s.population_size) {
    fail(ErrorCode::LengthMismatch, "cma_tell expects " + std::to_string(s.population_size) +
                                        " samples and fitness values");
  }
  const auto n = s.mean.size();
  for (std::size_t k = 0; k < samples.size(); ++k) {
    if (static_cast<Eigen::Index>(samples[k].size()) != n) fail(ErrorCode::LengthMismatch, "sample has the wrong dimension");
    if (!std::isfinite(fitnesses[k])) fail(ErrorCode::NonFiniteFitness, "non-finite fitness passed to cma_tell");
  }

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return fitnesses[a] > fitnesses[b]; });

  const double nd = static_cast<double>(n);
  std::vector<Eigen::VectorXd> steps(s.mu);
  Eigen::VectorXd y_w = Eigen::VectorXd::Zero(n);
  for (std::size_t i = 0; i < s.mu; ++i) {
    steps[i] = (Eigen::Map<const Eigen::VectorXd>(samples[order[i]].data(), n) - s.mean) / s.sigma;
    y_w += s.weights[static_cast<Eigen::Index>(i)] * steps[i];
  }
  s.mean += s.sigma * y_w;

  // C^{-1/2} y_w = B diag(1/axis) B^T y_w
  const Eigen::VectorXd whitened = s.basis * (s.basis.transpose() * y_w).cwiseQuotient(s.axis);
  s.path_sigma = (1.0 - s.c_sigma) * s.path_sigma + std::sqrt(s.c_sigma * (2.0 - s.c_sigma) * s.mu_eff) * whitened;
  const double ps_norm = s.path_sigma.norm();
  const double decay = 1.0 - std::pow(1.0 - s.c_sigma, 2.0 * static_cast<double>(s.generation + 1));
  const bool h_sigma = ps_norm / std::sqrt(decay) < (1.4 + 2.0 / (nd + 1.0)) * s.chi_n;
  s.path_c = (1.0 - s.c_c) * s.path_c + (h_sigma ? std::sqrt(s.c_c * (2.0 - s.c_c) * s.mu_eff) : 0.0) * y_w;

  Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
  for (std::size_t i = 0; i < s.mu; ++i) rank_mu += s.weights[static_cast<Eigen::Index>(i)] * steps[i] * steps[i].transpose();
  const double stall = h_sigma ? 0.0 : s.c1 * s.c_c * (2.0 - s.c_c);
  s.covariance = (1.0 - s.c1 - s.c_mu + stall) * s.covariance + s.c1 * s.path_c * s.path_c.transpose() + s.c_mu * rank_mu;

  s.sigma *= std::exp((s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1.0));
  // keep sigma representable; a collapsed distribution just resamples the mean
  s.sigma = std::clamp(s.sigma, 1e-300, 1e300);
  ++s.generation;
  refresh_eigensystem(s);
}

FitnessReport cma_search(const SearchSpace& space, const Fitness& fitness, std::size_t budget, std::uint64_t seed,
                         const SearchOptions& options) {
  CmaState state = cma_init(space, seed, options.population_size);
  if (budget < state.population_size) {
    fail(ErrorCode::InvalidArgument, "budget " + std::to_string(budget) + " is smaller than the population size " +
                                         std::to_string(state.population_size));
  }

  FitnessReport report;
  std::map<std::vector<long long>, double> cache;
  while (report.samples_drawn < budget) {
    const auto samples = cma_ask(state);
    const std::size_t take = std::min(samples.size(), budget - report.samples_drawn);

    // distinct uncached keys in sample order
    std::vector<std::vector<long long>> keys(take);
    std::vector<std::size_t> pending;
    std::map<std::vector<long long>, std::size_t> first_seen;
    for (std::size_t k = 0; k < take; ++k) {
      keys[k] = cache_key(samples[k]);
      if (!cache.count(keys[k]) && first_seen.emplace(keys[k], k).second) pending.push_back(k);
    }

    std::vector<double> values(pending.size());
    const std::size_t workers = std::max<std::size_t>(1, options.workers);
    for (std::size_t start = 0; start < pending.size(); start += workers) {
      const std::size_t stop = std::min(pending.size(), start + workers);
      if (workers == 1) {
        values[start] = evaluate(fitness, round4(samples[pending[start]]));
        continue;
      }
      std::vector<std::future<double>> running;
      for (std::size_t p = start; p < stop; ++p) {
        running.push_back(std::async(std::launch::async, [&, p] { return evaluate(fitness, round4(samples[pending[p]])); }));
      }
      // results are paired by index, not completion order
      for (std::size_t p = start; p < stop; ++p) values[p] = running[p - start].get();
    }
    for (std::size_t p = 0; p < pending.size(); ++p) {
      auto params = round4(samples[pending[p]]);
      cache.emplace(keys[pending[p]], values[p]);
      ++report.evaluations_used;
      if (report.best_params.empty() || values[p] > report.best_fitness) {
        report.best_fitness = values[p];
        report.best_params = params;
      }
      report.history.emplace_back(std::move(params), values[p]);
    }

    std::vector<double> fitnesses(take);
    for (std::size_t k = 0; k < take; ++k) fitnesses[k] = cache.at(keys[k]);
    report.samples_drawn += take;
    if (take == samples.size()) cma_tell(state, samples, fitnesses);
  }
  return report;
}

}  // namespace pcbmerge
