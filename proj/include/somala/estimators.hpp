#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include "somala/errors.hpp"
#include "somala/model.hpp"
#include "somala/parallel.hpp"
#include "somala/rng.hpp"

namespace somala {

// ---------------------------------------------------------------------------
// Observed information via the Fisher-identity score recursion.

struct InfoMatrix {
  Eigen::MatrixXd matrix;
  Eigen::Index iterations_averaged = 0;
};

/// (1/N) sum_i s_i s_i^T with s_i the complete-data score at (beta, xi_i).
inline Eigen::MatrixXd score_outer_information(const LatentModel& model, const ParamCache& cache,
                                               const LatentState& xi, int workers = 1) {
  const Eigen::Index n = model.n_obs();
  const Eigen::Index p = model.layout()->dim();
  Eigen::MatrixXd scores(n, p);
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      scores.row(static_cast<Eigen::Index>(i)) =
          model.grad_params(cache, static_cast<Eigen::Index>(i),
                            xi.row(static_cast<Eigen::Index>(i)).transpose())
              .transpose();
  });
  return scores.transpose() * scores / static_cast<double>(n);
}

/// Applies the stochastic-approximation recursion I_t = I_{t-1} +
/// gamma_t (tilde_t - I_{t-1}) starting from zero and returns the average of
/// the iterates past the burn-in index.
inline InfoMatrix observed_information(const std::vector<Eigen::MatrixXd>& tilde_sequence,
                                       const std::vector<double>& gammas,
                                       std::size_t burn_in) {
  if (tilde_sequence.empty() || tilde_sequence.size() != gammas.size())
    throw ConfigError("observed_information needs matching, nonempty sequences");
  if (burn_in >= tilde_sequence.size())
    throw ConfigError("observed_information: empty post-burn-in trace");
  const Eigen::Index p = tilde_sequence.front().rows();
  Eigen::MatrixXd recursion = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(p, p);
  Eigen::Index count = 0;
  for (std::size_t t = 0; t < tilde_sequence.size(); ++t) {
    recursion += gammas[t] * (tilde_sequence[t] - recursion);
    if (t >= burn_in) {
      sum += recursion;
      ++count;
    }
  }
  InfoMatrix out;
  out.matrix = sum / static_cast<double>(count);
  out.iterations_averaged = count;
  return out;
}

// ---------------------------------------------------------------------------
// Importance-sampling estimate of the marginal log-likelihood.

/// Per-observation Gaussian importance densities moment-matched to retained
/// posterior draws, with diagonal tail inflation.
struct ImportanceDensity {
  std::vector<Eigen::VectorXd> mean;
  std::vector<Eigen::MatrixXd> cov;
  std::vector<Eigen::MatrixXd> chol;        // factor of cov, for sampling
  std::vector<Eigen::MatrixXd> chol_inv;    // for density evaluation
  std::vector<double> log_norm;             // -k/2 log(2 pi) - 1/2 log|cov|
  double inflation = 2.0;

  Eigen::Index n() const { return static_cast<Eigen::Index>(mean.size()); }

  double logpdf(Eigen::Index i, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const Eigen::VectorXd w = chol_inv[static_cast<std::size_t>(i)] *
                              (x - mean[static_cast<std::size_t>(i)]);
    return log_norm[static_cast<std::size_t>(i)] - 0.5 * w.squaredNorm();
  }

  Eigen::VectorXd sample(Eigen::Index i, RngStream& rng) const {
    const Eigen::Index k = mean[static_cast<std::size_t>(i)].size();
    return mean[static_cast<std::size_t>(i)] +
           chol[static_cast<std::size_t>(i)] * rng.normal_vector(k);
  }
};

/// Moment-matches a Gaussian per observation, inflates the covariance
/// diagonal, and floors eigenvalues at 1e-8 to keep the density proper.
inline ImportanceDensity fit_importance_density(
    const std::vector<std::vector<Eigen::VectorXd>>& samples, double inflation = 2.0) {
  if (inflation < 1.0) throw ConfigError("tail inflation must be at least 1");
  constexpr double kEigenFloor = 1e-8;
  ImportanceDensity density;
  density.inflation = inflation;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& draws = samples[i];
    if (draws.size() < 10)
      throw ConfigError("observation " + std::to_string(i) +
                        " has fewer than 10 retained samples");
    const Eigen::Index k = draws.front().size();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(k);
    for (const auto& x : draws) mean += x;
    mean /= static_cast<double>(draws.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
    for (const auto& x : draws) cov += (x - mean) * (x - mean).transpose();
    cov /= static_cast<double>(draws.size() - 1);
    cov.diagonal() *= inflation;

    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd floored = eig.eigenvalues().cwiseMax(kEigenFloor);
    cov = eig.eigenvectors() * floored.asDiagonal() * eig.eigenvectors().transpose();

    Eigen::MatrixXd L = cholesky_factor(cov);
    double log_det = 0.0;
    for (Eigen::Index r = 0; r < k; ++r) log_det += 2.0 * std::log(L(r, r));
    density.mean.push_back(std::move(mean));
    density.cov.push_back(cov);
    density.chol_inv.push_back(
        L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(k, k)));
    density.chol.push_back(std::move(L));
    density.log_norm.push_back(-0.5 * static_cast<double>(k) * std::log(2.0 * std::numbers::pi) -
                               0.5 * log_det);
  }
  return density;
}

struct LogMarginalEstimate {
  double total = 0.0;
  Eigen::VectorXd per_obs;
  Eigen::VectorXd effective_sample_size;  // (sum w)^2 / sum w^2 per observation
  double min_ess = 0.0;
  double max_weight_fraction = 0.0;
};

namespace estimator_detail {

inline double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace estimator_detail

/// Self-normalized importance-sampling estimator of each observation's
/// marginal log-likelihood contribution: log(sum_t w_t f(Y_i | xi*_t) / sum_t
/// w_t) with w_t the prior-to-importance density ratio. All weight arithmetic
/// runs through log-sum-exp.
inline LogMarginalEstimate is_log_marginal(const LatentModel& model, const ParamCache& cache,
                                           const ImportanceDensity& density, Eigen::Index t_draws,
                                           std::uint64_t seed, int workers = 1) {
  if (t_draws < 1) throw ConfigError("importance sampling needs at least one draw");
  const Eigen::Index n = model.n_obs();
  if (density.n() != n) throw ConfigError("importance density count does not match dataset");

  LogMarginalEstimate out;
  out.per_obs.resize(n);
  Eigen::VectorXd ess(n);
  Eigen::VectorXd max_frac(n);
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t pos = begin; pos < end; ++pos) {
      const Eigen::Index i = static_cast<Eigen::Index>(pos);
      RngStream rng(seed, StreamDomain::importance, static_cast<std::uint64_t>(i));
      Eigen::VectorXd log_w(t_draws);
      Eigen::VectorXd log_f(t_draws);
      for (Eigen::Index t = 0; t < t_draws; ++t) {
        const Eigen::VectorXd draw = density.sample(i, rng);
        log_w(t) = model.prior_loglik(cache, draw) - density.logpdf(i, draw);
        log_f(t) = model.conditional_loglik(cache, i, draw);
      }
      const double lse_w = estimator_detail::log_sum_exp(log_w);
      if (!std::isfinite(lse_w))
        throw DivergenceError("all importance weights vanished for observation " +
                              std::to_string(i) + "; density mismatch");
      out.per_obs(i) = estimator_detail::log_sum_exp(log_w + log_f) - lse_w;
      ess(i) = std::exp(2.0 * lse_w - estimator_detail::log_sum_exp(2.0 * log_w));
      max_frac(i) = std::exp(log_w.maxCoeff() - lse_w);
    }
  });
  out.total = out.per_obs.sum();
  out.effective_sample_size = ess;
  out.min_ess = ess.minCoeff();
  out.max_weight_fraction = max_frac.maxCoeff();
  return out;
}

// ---------------------------------------------------------------------------
// Gauss-Hermite quadrature, used as the deterministic K = 1 oracle.

struct QuadratureRule {
  Eigen::VectorXd nodes;    // roots of H_n
  Eigen::VectorXd weights;  // sum to sqrt(pi)
};

/// Golub-Welsch construction from the Hermite three-term recurrence.
inline QuadratureRule gauss_hermite(Eigen::Index n_nodes) {
  if (n_nodes < 1) throw ConfigError("quadrature needs at least one node");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n_nodes, n_nodes);
  for (Eigen::Index i = 1; i < n_nodes; ++i) {
    const double b = std::sqrt(static_cast<double>(i) / 2.0);
    jacobi(i, i - 1) = b;
    jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  QuadratureRule rule;
  rule.nodes = eig.eigenvalues();
  rule.weights.resize(n_nodes);
  const double mu0 = std::sqrt(std::numbers::pi);
  for (Eigen::Index m = 0; m < n_nodes; ++m) {
    const double v0 = eig.eigenvectors()(0, m);
    rule.weights(m) = mu0 * v0 * v0;
  }
  return rule;
}

/// Deterministic marginal log-likelihood for K = 1 models:
/// sum_i log integral f_i(Y_i, xi | beta) dxi evaluated with Gauss-Hermite
/// nodes under the N(prior_mean, sigma^2) prior.
inline double quadrature_loglik_1d(const LatentModel& model, const ParamCache& cache,
                                   const QuadratureRule& rule, int workers = 1) {
  if (model.latent_dim() != 1)
    throw ConfigError("quadrature_loglik_1d requires a one-dimensional latent space");
  const double sd = cache.L(0, 0);
  const double mean = cache.prior_mean(0);
  const Eigen::Index m_nodes = rule.nodes.size();
  Eigen::VectorXd log_weights(m_nodes);
  Eigen::VectorXd points(m_nodes);
  for (Eigen::Index m = 0; m < m_nodes; ++m) {
    log_weights(m) = std::log(rule.weights(m)) - 0.5 * std::log(std::numbers::pi);
    points(m) = mean + std::numbers::sqrt2 * sd * rule.nodes(m);
  }
  const Eigen::Index n = model.n_obs();
  Eigen::VectorXd per_obs(n);
  parallel_for(static_cast<std::size_t>(n), workers, [&](std::size_t begin, std::size_t end) {
    Eigen::VectorXd terms(m_nodes);
    Eigen::VectorXd xi(1);
    for (std::size_t pos = begin; pos < end; ++pos) {
      const Eigen::Index i = static_cast<Eigen::Index>(pos);
      for (Eigen::Index m = 0; m < m_nodes; ++m) {
        xi(0) = points(m);
        terms(m) = log_weights(m) + model.conditional_loglik(cache, i, xi);
      }
      per_obs(i) = estimator_detail::log_sum_exp(terms);
    }
  });
  return per_obs.sum();
}

}  // namespace somala
