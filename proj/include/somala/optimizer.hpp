#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <functional>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "somala/chol.hpp"
#include "somala/errors.hpp"
#include "somala/estimators.hpp"
#include "somala/model.hpp"
#include "somala/parallel.hpp"
#include "somala/rng.hpp"
#include "somala/samplers.hpp"

namespace somala {

/// Windowed stopping rule: stop once the max absolute change between
/// consecutive window averages stays below `threshold` for `consecutive`
/// windows in a row.
struct StopRule {
  Eigen::Index window = 50;
  double threshold = 0.05;
  int consecutive = 10;

  void validate() const {
    if (window < 1 || threshold <= 0.0 || consecutive < 1)
      throw ConfigError("stop rule fields must be positive");
  }
};

struct OptimizerConfig {
  SamplerConfig sampler;
  Eigen::Index batch_size = 0;  // 0 selects fullbatch (n = N)
  bool qn = false;
  double gamma_exponent = 0.51;
  std::optional<double> fixed_gamma;  // diagnostic override of the schedule
  std::map<std::string, double> block_rescale;
  Eigen::Index averaging_start_epoch = 0;
  std::optional<StopRule> stop;
  Eigen::Index max_epochs = 100;
  std::uint64_t seed = 0;
  int workers = 1;
  Eigen::Index checkpoint_stride = 1;
  bool partition_epochs = false;  // shuffled-partition minibatches per epoch
  bool compute_info = false;
  Eigen::Index info_burn_in_epochs = -1;  // <0: use averaging_start_epoch
  bool retain_latents = false;
  Eigen::Index retain_cap = 500;

  void validate(Eigen::Index n_obs) const {
    sampler.validate();
    if (batch_size < 0 || batch_size > n_obs)
      throw ConfigError("batch size must lie in [1, N]");
    if (gamma_exponent <= 0.5 || gamma_exponent > 1.0)
      throw ConfigError("gamma exponent must lie in (0.5, 1]");
    if (fixed_gamma && *fixed_gamma < 0.0) throw ConfigError("fixed gamma must be >= 0");
    for (const auto& [name, factor] : block_rescale)
      if (factor <= 0.0) throw ConfigError("block rescale factor for '" + name + "' must be > 0");
    if (max_epochs < 0) throw ConfigError("max_epochs must be >= 0");
    if (checkpoint_stride < 1) throw ConfigError("checkpoint stride must be >= 1");
    if (stop) stop->validate();
  }
};

/// Diagonal quasi-Newton state with entries floored at 1e-2.
struct QNState {
  Eigen::VectorXd d_diag;

  static constexpr double kFloor = 1e-2;

  static QNState identity(Eigen::Index p) {
    QNState s;
    s.d_diag = Eigen::VectorXd::Ones(p);
    return s;
  }
};

struct Checkpoint {
  Eigen::Index epoch = 0;
  double seconds = 0.0;
  Eigen::VectorXd beta;  // raw iterate before averaging starts, PR average after
  double accept_rate = 0.0;
};

struct FitResult {
  ParamVector beta_final;
  ParamVector beta_pr;
  std::vector<Checkpoint> checkpoints;
  std::string stop_reason;  // "max_epochs" | "diff_max" | "diverged"
  std::string diagnostic;
  std::vector<double> diff_max_trace;
  Eigen::Index epochs_run = 0;
  double mean_accept_rate = 0.0;
  double max_row_norm_error = 0.0;  // constrained models: worst |row norm - 1|
  double max_diag_error = 0.0;      // constrained models: worst |diag(Sigma) - 1|
  std::optional<Eigen::MatrixXd> observed_information;
  std::vector<std::vector<Eigen::VectorXd>> retained_latents;  // per observation
  LatentState final_latents;
  double elapsed_seconds = 0.0;

  bool diverged() const { return stop_reason == "diverged"; }
};

// ---------------------------------------------------------------------------
// Pieces of the update step.

/// Step size after `update_counter` parameter updates: gamma = t_eff^-exponent
/// with t_eff = ceil(counter / (N/n)), so minibatch runs decay once every
/// N/n updates and fullbatch runs decay every update.
inline double step_schedule(Eigen::Index update_counter, Eigen::Index n, Eigen::Index n_obs,
                            double gamma_exponent) {
  if (update_counter < 1) throw ConfigError("update counter starts at 1");
  const long long t_eff =
      (static_cast<long long>(update_counter) * n + n_obs - 1) / static_cast<long long>(n_obs);
  return std::pow(static_cast<double>(t_eff), -gamma_exponent);
}

/// (N/n)-scaled sum of per-observation gradients over the index set S.
/// Rows are evaluated in parallel and reduced in index order, so the result
/// does not depend on the worker count.
inline Eigen::VectorXd minibatch_sg(const LatentModel& model, const ParamCache& cache,
                                    const LatentState& xi, const std::vector<Eigen::Index>& S,
                                    int workers = 1) {
  if (S.empty()) throw ConfigError("minibatch index set must be nonempty");
  const Eigen::Index p = model.layout()->dim();
  Eigen::MatrixXd per_row(p, static_cast<Eigen::Index>(S.size()));
  parallel_for(S.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t pos = begin; pos < end; ++pos) {
      const Eigen::Index i = S[pos];
      per_row.col(static_cast<Eigen::Index>(pos)) =
          model.grad_params(cache, i, xi.row(i).transpose());
    }
  });
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(p);
  for (Eigen::Index c = 0; c < per_row.cols(); ++c) sum += per_row.col(c);
  const double scale = static_cast<double>(model.n_obs()) / static_cast<double>(S.size());
  return scale * sum;
}

/// Expands per-block rescale factors into a per-coordinate vector.
inline Eigen::VectorXd expand_block_rescale(const BlockLayout& layout,
                                            const std::map<std::string, double>& rescale) {
  Eigen::VectorXd r = Eigen::VectorXd::Ones(layout.dim());
  for (const auto& [name, factor] : rescale) {
    const auto& b = layout.block(name);
    r.segment(b.offset, b.size).setConstant(factor);
  }
  return r;
}

/// One ascent step followed by the projection onto the parameter space:
/// beta' = project(beta + gamma * D^-1 (rescale .* grad)).
inline ParamVector sg_update(const LatentModel& model, const ParamVector& beta,
                             const Eigen::VectorXd& grad, double gamma,
                             const QNState& qn_state, const Eigen::VectorXd& rescale) {
  ParamVector next = beta;
  next.values += gamma * (rescale.array() * grad.array() / qn_state.d_diag.array()).matrix();
  if (!next.values.allFinite())
    throw DivergenceError("non-finite parameter update; the run diverged");
  return model.project(std::move(next));
}

/// Stochastic-approximation recursion on the diagonal curvature estimate:
/// d' = max(d + gamma (h_hat - d), 1e-2) with h_hat the (N/n)-scaled diagonal
/// of the negative complete-data Hessian summed over the batch. For
/// constrained models the Cholesky-block entries are averaged within each row
/// so the proximal projection stays exact under the diagonal metric.
inline QNState qn_update(const QNState& state, const LatentModel& model, const ParamCache& cache,
                         const LatentState& xi, const std::vector<Eigen::Index>& S, double gamma,
                         int workers = 1) {
  if (S.empty()) throw ConfigError("quasi-Newton batch must be nonempty");
  const Eigen::Index p = model.layout()->dim();
  Eigen::MatrixXd per_row(p, static_cast<Eigen::Index>(S.size()));
  parallel_for(S.size(), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t pos = begin; pos < end; ++pos) {
      const Eigen::Index i = S[pos];
      per_row.col(static_cast<Eigen::Index>(pos)) =
          model.hessian_diag(cache, i, xi.row(i).transpose());
    }
  });
  Eigen::VectorXd h_hat = Eigen::VectorXd::Zero(p);
  for (Eigen::Index c = 0; c < per_row.cols(); ++c) h_hat -= per_row.col(c);
  h_hat *= static_cast<double>(model.n_obs()) / static_cast<double>(S.size());

  if (model.constrained()) {
    const auto& chol = model.layout()->block("chol");
    const Eigen::Index k = model.latent_dim();
    Eigen::Index idx = chol.offset;
    for (Eigen::Index r = 0; r < k; ++r) {
      const double mean = h_hat.segment(idx, r + 1).mean();
      h_hat.segment(idx, r + 1).setConstant(mean);
      idx += r + 1;
    }
  }

  QNState next;
  next.d_diag =
      (state.d_diag + gamma * (h_hat - state.d_diag)).cwiseMax(QNState::kFloor);
  return next;
}

/// DIFF_MAX stopping monitor over windowed parameter averages. The first
/// window is compared against beta^(0).
class DiffMaxMonitor {
 public:
  DiffMaxMonitor(StopRule rule, Eigen::VectorXd beta0)
      : rule_(rule), reference_(std::move(beta0)) {
    rule_.validate();
    window_sum_ = Eigen::VectorXd::Zero(reference_.size());
  }

  /// Feeds one end-of-epoch iterate; returns the DIFF_MAX value when a
  /// window completes.
  std::optional<double> feed_epoch(const Eigen::VectorXd& beta) {
    window_sum_ += beta;
    if (++in_window_ < rule_.window) return std::nullopt;
    const Eigen::VectorXd avg = window_sum_ / static_cast<double>(rule_.window);
    window_sum_.setZero();
    in_window_ = 0;
    return push_window_average(avg).first;
  }

  /// Core rule on consecutive window averages: returns (value, fired).
  std::pair<double, bool> push_window_average(const Eigen::VectorXd& avg) {
    const double value = (avg - reference_).cwiseAbs().maxCoeff();
    reference_ = avg;
    trace_.push_back(value);
    below_ = value < rule_.threshold ? below_ + 1 : 0;
    if (below_ >= rule_.consecutive) fired_ = true;
    return {value, fired_};
  }

  bool fired() const { return fired_; }
  const std::vector<double>& trace() const { return trace_; }

 private:
  StopRule rule_;
  Eigen::VectorXd reference_;
  Eigen::VectorXd window_sum_;
  Eigen::Index in_window_ = 0;
  int below_ = 0;
  bool fired_ = false;
  std::vector<double> trace_;
};

namespace optimizer_detail {

/// Bounded reservoir of latent draws: once full, the stride doubles and
/// every other retained sample is dropped, keeping draws spread over the run.
class RetentionBuffer {
 public:
  explicit RetentionBuffer(Eigen::Index cap) : cap_(static_cast<std::size_t>(cap)) {}

  void offer(const Eigen::VectorXd& x) {
    if (++count_ % stride_ != 0) return;
    if (samples_.size() == cap_) {
      std::vector<Eigen::VectorXd> kept;
      kept.reserve(cap_ / 2);
      for (std::size_t i = 1; i < samples_.size(); i += 2) kept.push_back(samples_[i]);
      samples_ = std::move(kept);
      stride_ *= 2;
      if (count_ % stride_ != 0) return;
    }
    samples_.push_back(x);
  }

  std::vector<Eigen::VectorXd> take() { return std::move(samples_); }

 private:
  std::size_t cap_;
  std::size_t stride_ = 1;
  std::size_t count_ = 0;
  std::vector<Eigen::VectorXd> samples_;
};

inline std::vector<Eigen::Index> draw_minibatch(Eigen::Index n_obs, Eigen::Index n,
                                                RngStream& rng) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_obs));
  std::iota(idx.begin(), idx.end(), Eigen::Index{0});
  for (Eigen::Index j = 0; j < n; ++j) {
    const Eigen::Index swap_with =
        j + static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(n_obs - j)));
    std::swap(idx[static_cast<std::size_t>(j)], idx[static_cast<std::size_t>(swap_with)]);
  }
  idx.resize(static_cast<std::size_t>(n));
  return idx;
}

inline void track_constraints(const LatentModel& model, const ParamVector& beta,
                              double& max_row_err, double& max_diag_err) {
  if (!model.constrained()) return;
  const Eigen::Index k = model.latent_dim();
  const Eigen::MatrixXd L = chol_unpack(beta.block("chol"), k);
  for (Eigen::Index r = 0; r < k; ++r)
    max_row_err = std::max(max_row_err, std::abs(L.row(r).head(r + 1).norm() - 1.0));
  const Eigen::VectorXd diag = (L * L.transpose()).diagonal();
  for (Eigen::Index r = 0; r < k; ++r)
    max_diag_err = std::max(max_diag_err, std::abs(diag(r) - 1.0));
}

}  // namespace optimizer_detail

/// Observer invoked at the end of every epoch with the current iterate and
/// latent state; used by the tuning harness.
using EpochObserver =
    std::function<void(Eigen::Index epoch, const ParamVector& beta, const LatentState& xi)>;

/// Full stochastic-approximation loop. One epoch performs floor(N/n) inner
/// steps of {draw minibatch, kernel sweep, optional QN update, minibatch SG,
/// projected ascent}; fullbatch configurations perform one. The whole run is
/// a pure function of (model, init, config).
inline FitResult run(const LatentModel& model, const ParamVector& beta_init,
                     const LatentState& xi_init, const OptimizerConfig& config,
                     const EpochObserver& on_epoch = {}) {
  const Eigen::Index n_obs = model.n_obs();
  config.validate(n_obs);
  const Eigen::Index n = config.batch_size == 0 ? n_obs : config.batch_size;
  const Eigen::Index inner_steps = std::max<Eigen::Index>(1, n_obs / n);
  const Eigen::Index p = model.layout()->dim();
  if (xi_init.rows() != n_obs || xi_init.cols() != model.latent_dim())
    throw ConfigError("latent state shape does not match the dataset");

  const auto t_start = std::chrono::steady_clock::now();
  auto elapsed = [&t_start]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  };

  FitResult fit;
  ParamVector beta = model.project(beta_init);
  LatentState xi = xi_init;
  QNState qn_state = QNState::identity(p);
  // Without a QN update the metric is the constant diagonal N: the summed
  // gradient then enters at per-observation scale, mirroring how the
  // curvature estimate of the QN metric carries the N scale.
  QNState flat_metric = QNState::identity(p);
  flat_metric.d_diag.setConstant(static_cast<double>(n_obs));
  const Eigen::VectorXd rescale = expand_block_rescale(*model.layout(), config.block_rescale);

  Eigen::VectorXd pr_sum = Eigen::VectorXd::Zero(p);
  Eigen::Index pr_count = 0;
  auto pr_value = [&]() { return pr_count > 0 ? (pr_sum / pr_count).eval() : beta.values; };

  std::optional<DiffMaxMonitor> monitor;
  if (config.stop) monitor.emplace(*config.stop, beta.values);

  const Eigen::Index info_burn_in =
      config.info_burn_in_epochs >= 0 ? config.info_burn_in_epochs : config.averaging_start_epoch;
  Eigen::MatrixXd info_recursion = Eigen::MatrixXd::Zero(p, p);
  Eigen::MatrixXd info_sum = Eigen::MatrixXd::Zero(p, p);
  Eigen::Index info_count = 0;

  std::vector<optimizer_detail::RetentionBuffer> retention;
  if (config.retain_latents)
    retention.assign(static_cast<std::size_t>(n_obs),
                     optimizer_detail::RetentionBuffer(config.retain_cap));

  std::vector<Eigen::Index> all_indices(static_cast<std::size_t>(n_obs));
  std::iota(all_indices.begin(), all_indices.end(), Eigen::Index{0});

  if (config.max_epochs > 0) {
    Checkpoint c0;
    c0.epoch = 0;
    c0.seconds = 0.0;
    c0.beta = beta.values;
    fit.checkpoints.push_back(std::move(c0));
  }
  optimizer_detail::track_constraints(model, beta, fit.max_row_norm_error, fit.max_diag_error);

  Eigen::Index update_counter = 0;
  long long accepted_total = 0, proposed_total = 0;
  fit.stop_reason = "max_epochs";

  try {
    for (Eigen::Index epoch = 1; epoch <= config.max_epochs; ++epoch) {
      long long accepted_epoch = 0, proposed_epoch = 0;
      std::vector<Eigen::Index> partition;
      if (config.partition_epochs && n < n_obs) {
        RngStream shuffle_rng(config.seed, StreamDomain::minibatch,
                              static_cast<std::uint64_t>(epoch), 0xF00D);
        partition = optimizer_detail::draw_minibatch(n_obs, n_obs, shuffle_rng);
      }

      for (Eigen::Index s = 0; s < inner_steps; ++s) {
        ++update_counter;
        std::vector<Eigen::Index> batch;
        if (n == n_obs) {
          batch = all_indices;
        } else if (config.partition_epochs) {
          batch.assign(partition.begin() + s * n, partition.begin() + (s + 1) * n);
        } else {
          RngStream batch_rng(config.seed, StreamDomain::minibatch,
                              static_cast<std::uint64_t>(update_counter));
          batch = optimizer_detail::draw_minibatch(n_obs, n, batch_rng);
        }

        const ParamCache cache = model.make_cache(beta);
        accepted_epoch += sweep(model, cache, xi, batch, config.sampler, config.seed,
                                static_cast<std::uint64_t>(update_counter), config.workers);
        proposed_epoch += static_cast<long long>(batch.size());

        const double gamma =
            config.fixed_gamma
                ? *config.fixed_gamma
                : step_schedule(update_counter, n, n_obs, config.gamma_exponent);

        if (config.compute_info) {
          const Eigen::MatrixXd tilde_info =
              score_outer_information(model, cache, xi, config.workers);
          info_recursion += gamma * (tilde_info - info_recursion);
          if (epoch > info_burn_in) {
            info_sum += info_recursion;
            ++info_count;
          }
        }

        if (config.qn)
          qn_state = qn_update(qn_state, model, cache, xi, batch, gamma, config.workers);
        const Eigen::VectorXd grad = minibatch_sg(model, cache, xi, batch, config.workers);
        beta = sg_update(model, beta, grad, gamma, config.qn ? qn_state : flat_metric, rescale);
        optimizer_detail::track_constraints(model, beta, fit.max_row_norm_error,
                                            fit.max_diag_error);
        if (epoch > config.averaging_start_epoch) {
          pr_sum += beta.values;
          ++pr_count;
        }
      }

      accepted_total += accepted_epoch;
      proposed_total += proposed_epoch;
      fit.epochs_run = epoch;
      if (on_epoch) on_epoch(epoch, beta, xi);

      if (config.retain_latents && epoch > config.averaging_start_epoch)
        for (Eigen::Index i = 0; i < n_obs; ++i)
          retention[static_cast<std::size_t>(i)].offer(xi.row(i).transpose());

      const bool stride_hit = epoch % config.checkpoint_stride == 0;
      bool fired = false;
      if (monitor) {
        monitor->feed_epoch(beta.values);
        fired = monitor->fired();
      }
      if (stride_hit || fired || epoch == config.max_epochs) {
        Checkpoint c;
        c.epoch = epoch;
        c.seconds = elapsed();
        c.beta = epoch > config.averaging_start_epoch ? pr_value() : beta.values;
        c.accept_rate = proposed_epoch > 0
                            ? static_cast<double>(accepted_epoch) / proposed_epoch
                            : 0.0;
        fit.checkpoints.push_back(std::move(c));
      }
      if (fired) {
        fit.stop_reason = "diff_max";
        break;
      }
    }
  } catch (const DivergenceError& err) {
    fit.stop_reason = "diverged";
    fit.diagnostic = err.what();
  }

  fit.beta_final = beta;
  fit.beta_pr = ParamVector(pr_value(), model.layout());
  fit.mean_accept_rate =
      proposed_total > 0 ? static_cast<double>(accepted_total) / proposed_total : 0.0;
  if (monitor) fit.diff_max_trace = monitor->trace();
  if (config.compute_info && info_count > 0)
    fit.observed_information = info_sum / static_cast<double>(info_count);
  if (config.retain_latents) {
    fit.retained_latents.reserve(retention.size());
    for (auto& buf : retention) fit.retained_latents.push_back(buf.take());
  }
  fit.final_latents = std::move(xi);
  fit.elapsed_seconds = elapsed();
  return fit;
}

}  // namespace somala
