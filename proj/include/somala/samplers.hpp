#pragma once

#include <Eigen/Core>
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

enum class SamplerKind { mala, rwmh };

/// Per-observation MCMC kernel settings. `h` is the Euler-Maruyama step of
/// the Langevin proposal; `sigma2` the random-walk noise variance.
struct SamplerConfig {
  SamplerKind kind = SamplerKind::mala;
  double h = 0.1;
  double sigma2 = 0.3;
  int inner_steps = 1;

  void validate() const {
    if (kind == SamplerKind::mala && h <= 0.0) throw ConfigError("MALA step h must be positive");
    if (kind == SamplerKind::rwmh && sigma2 <= 0.0)
      throw ConfigError("random-walk variance must be positive");
    if (inner_steps < 1) throw ConfigError("inner_steps must be at least 1");
  }
};

struct KernelOutcome {
  Eigen::VectorXd new_xi;
  bool accepted = false;
  double log_alpha = 0.0;
};

namespace sampler_detail {

constexpr double kDriftGuard = 1e6;

inline void check_drift(const Eigen::VectorXd& grad_u, double h) {
  if (!grad_u.allFinite())
    throw DivergenceError("non-finite latent gradient; chain state diverged");
  if (h * grad_u.norm() > kDriftGuard)
    throw DivergenceError("Langevin drift exceeds guard; reduce the MALA step size h");
}

}  // namespace sampler_detail

/// log q_h(to | from) for the Langevin proposal centred at from - h grad U(from).
inline double mala_log_q(const LatentModel& model, const ParamCache& cache, Eigen::Index i,
                         const Eigen::Ref<const Eigen::VectorXd>& from,
                         const Eigen::Ref<const Eigen::VectorXd>& to, double h) {
  const Eigen::VectorXd mean = from - h * model.grad_latent(cache, i, from);
  const double k = static_cast<double>(from.size());
  return -0.5 * k * std::log(4.0 * std::numbers::pi * h) -
         (to - mean).squaredNorm() / (4.0 * h);
}

/// log of the Metropolis ratio min(1, .) for a MALA move from -> to.
inline double mala_log_alpha(const LatentModel& model, const ParamCache& cache, Eigen::Index i,
                             const Eigen::Ref<const Eigen::VectorXd>& from,
                             const Eigen::Ref<const Eigen::VectorXd>& to, double h) {
  const double delta = model.complete_data_loglik(cache, i, to) +
                       mala_log_q(model, cache, i, to, from, h) -
                       model.complete_data_loglik(cache, i, from) -
                       mala_log_q(model, cache, i, from, to, h);
  return std::min(0.0, delta);
}

/// log of the Metropolis ratio for a symmetric random-walk move (q terms cancel).
inline double rwmh_log_alpha(const LatentModel& model, const ParamCache& cache, Eigen::Index i,
                             const Eigen::Ref<const Eigen::VectorXd>& from,
                             const Eigen::Ref<const Eigen::VectorXd>& to) {
  return std::min(0.0, model.complete_data_loglik(cache, i, to) -
                           model.complete_data_loglik(cache, i, from));
}

/// One MALA transition. Consumes exactly one K-vector Gaussian draw and one
/// uniform from the stream, in that order. A non-finite gradient at the
/// current state aborts; a non-finite proposal-side evaluation only rejects.
inline KernelOutcome mala_step(const LatentModel& model, const ParamCache& cache, Eigen::Index i,
                               const Eigen::Ref<const Eigen::VectorXd>& xi, double h,
                               RngStream& rng) {
  const Eigen::VectorXd grad_here = model.grad_latent(cache, i, xi);
  sampler_detail::check_drift(grad_here, h);

  const Eigen::VectorXd z = rng.normal_vector(xi.size());
  const double w = rng.uniform();

  const Eigen::VectorXd mean_fwd = xi - h * grad_here;
  const Eigen::VectorXd proposal = mean_fwd + std::sqrt(2.0 * h) * z;

  KernelOutcome out;
  out.log_alpha = -std::numeric_limits<double>::infinity();
  const Eigen::VectorXd grad_prop = model.grad_latent(cache, i, proposal);
  if (grad_prop.allFinite()) {
    const double k = static_cast<double>(xi.size());
    const double log_norm = -0.5 * k * std::log(4.0 * std::numbers::pi * h);
    const double log_q_fwd = log_norm - (proposal - mean_fwd).squaredNorm() / (4.0 * h);
    const Eigen::VectorXd mean_rev = proposal - h * grad_prop;
    const double log_q_rev = log_norm - (xi - mean_rev).squaredNorm() / (4.0 * h);
    const double delta = model.complete_data_loglik(cache, i, proposal) + log_q_rev -
                         model.complete_data_loglik(cache, i, xi) - log_q_fwd;
    if (std::isfinite(delta) || delta < 0.0) out.log_alpha = std::min(0.0, delta);
  }
  out.accepted = std::log(w) < out.log_alpha;
  if (out.accepted)
    out.new_xi = proposal;
  else
    out.new_xi = xi;
  return out;
}

/// One random-walk Metropolis-Hastings transition; same draw contract as
/// mala_step.
inline KernelOutcome rwmh_step(const LatentModel& model, const ParamCache& cache, Eigen::Index i,
                               const Eigen::Ref<const Eigen::VectorXd>& xi, double sigma2,
                               RngStream& rng) {
  const Eigen::VectorXd z = rng.normal_vector(xi.size());
  const double w = rng.uniform();
  const Eigen::VectorXd proposal = xi + std::sqrt(sigma2) * z;

  KernelOutcome out;
  const double delta = model.complete_data_loglik(cache, i, proposal) -
                       model.complete_data_loglik(cache, i, xi);
  out.log_alpha = std::isfinite(delta) ? std::min(0.0, delta)
                                       : -std::numeric_limits<double>::infinity();
  out.accepted = std::log(w) < out.log_alpha;
  if (out.accepted)
    out.new_xi = proposal;
  else
    out.new_xi = xi;
  return out;
}

inline KernelOutcome kernel_step(const LatentModel& model, const ParamCache& cache,
                                 Eigen::Index i, const Eigen::Ref<const Eigen::VectorXd>& xi,
                                 const SamplerConfig& config, RngStream& rng) {
  return config.kind == SamplerKind::mala ? mala_step(model, cache, i, xi, config.h, rng)
                                          : rwmh_step(model, cache, i, xi, config.sigma2, rng);
}

/// Applies one kernel step (or config.inner_steps of them) to every listed
/// observation; rows not listed are untouched. Each observation draws from a
/// substream keyed by (step_key, i), so the result is a pure function of the
/// inputs for any worker count.
inline Eigen::Index sweep(const LatentModel& model, const ParamCache& cache, LatentState& xi,
                          const std::vector<Eigen::Index>& indices, const SamplerConfig& config,
                          std::uint64_t master_seed, std::uint64_t step_key, int workers = 1) {
  config.validate();
  std::vector<std::uint8_t> accepted(indices.size(), 0);
  parallel_for(indices.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t pos = begin; pos < end; ++pos) {
      const Eigen::Index i = indices[pos];
      RngStream stream(master_seed, StreamDomain::kernel, step_key,
                       static_cast<std::uint64_t>(i));
      Eigen::VectorXd row = xi.row(i).transpose();
      std::uint8_t any = 0;
      for (int rep = 0; rep < config.inner_steps; ++rep) {
        KernelOutcome out = kernel_step(model, cache, i, row, config, stream);
        any = static_cast<std::uint8_t>(any | (out.accepted ? 1 : 0));
        row = std::move(out.new_xi);
      }
      xi.row(i) = row.transpose();
      accepted[pos] = any;
    }
  });
  Eigen::Index count = 0;
  for (const auto a : accepted) count += a;
  return count;
}

}  // namespace somala
