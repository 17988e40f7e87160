#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "somala/chol.hpp"
#include "somala/errors.hpp"
#include "somala/model.hpp"
#include "somala/optimizer.hpp"
#include "somala/parallel.hpp"
#include "somala/simulate.hpp"

namespace somala {

// ---------------------------------------------------------------------------
// Step-size tuning on the averaged negative complete-data log-likelihood.

struct TuneSpec {
  std::vector<double> candidates;
  Eigen::Index tune_epochs = 1000;
  Eigen::Index tail_epochs = 50;

  static std::vector<double> default_candidates(SamplerKind kind) {
    return kind == SamplerKind::mala ? std::vector<double>{0.01, 0.05, 0.1, 0.2}
                                     : std::vector<double>{0.1, 0.2, 0.3, 0.4};
  }

  void validate() const {
    if (candidates.empty()) throw ConfigError("tuning needs at least one candidate");
    if (tail_epochs < 1 || tail_epochs > tune_epochs)
      throw ConfigError("tail epochs must lie in [1, tune_epochs]");
    for (const double c : candidates)
      if (c <= 0.0) throw ConfigError("step candidates must be positive");
  }
};

struct TuneCandidateResult {
  double value = 0.0;
  double avg_ncll = 0.0;
  bool diverged = false;
};

struct TuneReport {
  double chosen = 0.0;
  std::vector<TuneCandidateResult> candidates;
};

/// Runs every candidate from the identical initial state and seed, averages
/// the negative complete-data log-likelihood over the final tail epochs, and
/// returns the argmin. Ties break toward the smaller step value; diverging
/// candidates are excluded.
inline TuneReport tune(const LatentModel& model, const ParamVector& init_beta,
                       const LatentState& init_xi, const OptimizerConfig& base,
                       const TuneSpec& spec) {
  spec.validate();
  std::vector<double> grid = spec.candidates;
  std::sort(grid.begin(), grid.end());

  TuneReport report;
  bool have_best = false;
  double best_value = 0.0;
  for (const double candidate : grid) {
    OptimizerConfig config = base;
    config.max_epochs = spec.tune_epochs;
    config.stop.reset();
    if (config.sampler.kind == SamplerKind::mala)
      config.sampler.h = candidate;
    else
      config.sampler.sigma2 = candidate;

    double tail_sum = 0.0;
    Eigen::Index tail_count = 0;
    const Eigen::Index tail_from = spec.tune_epochs - spec.tail_epochs;
    const auto observer = [&](Eigen::Index epoch, const ParamVector& beta,
                              const LatentState& xi) {
      if (epoch <= tail_from) return;
      const ParamCache cache = model.make_cache(beta);
      double ncll = 0.0;
      const Eigen::Index n = model.n_obs();
      std::vector<double> per_obs(static_cast<std::size_t>(n));
      parallel_for(static_cast<std::size_t>(n), config.workers,
                   [&](std::size_t begin, std::size_t end) {
                     for (std::size_t i = begin; i < end; ++i)
                       per_obs[i] = model.complete_data_loglik(
                           cache, static_cast<Eigen::Index>(i),
                           xi.row(static_cast<Eigen::Index>(i)).transpose());
                   });
      for (const double v : per_obs) ncll -= v;
      tail_sum += ncll;
      ++tail_count;
    };

    TuneCandidateResult result;
    result.value = candidate;
    const FitResult fit = run(model, init_beta, init_xi, config, observer);
    if (fit.diverged() || tail_count == 0) {
      result.diverged = true;
    } else {
      result.avg_ncll = tail_sum / static_cast<double>(tail_count);
      if (!have_best || result.avg_ncll < best_value) {
        have_best = true;
        best_value = result.avg_ncll;
        report.chosen = candidate;
      }
    }
    report.candidates.push_back(result);
  }
  if (!have_best) throw DivergenceError("every tuning candidate diverged");
  return report;
}

// ---------------------------------------------------------------------------
// Absolute errors per parameter block.

/// Block-wise absolute error between an estimate and the truth. Sigma blocks
/// compare the reconstructed Sigma matrices: all K^2 entries for the
/// multilevel model, off-diagonal entries only (K(K-1) of them) for the
/// correlation matrix of the M2PL.
inline double ae(const ParamVector& beta_hat, const ParamVector& beta_true,
                 const std::string& block, ModelKind kind, Eigen::Index k) {
  if (beta_hat.dim() != beta_true.dim())
    throw ConfigError("parameter layouts do not match in size");
  for (const auto& b : beta_true.layout->blocks())
    if (!beta_hat.layout->has_block(b.name) ||
        beta_hat.layout->block(b.name).size != b.size)
      throw ConfigError("parameter layouts do not match in blocks");

  if (block == "sigma") {
    const Eigen::MatrixXd sigma_hat = sigma_from_chol(chol_unpack(beta_hat.block("chol"), k));
    const Eigen::MatrixXd sigma_true = sigma_from_chol(chol_unpack(beta_true.block("chol"), k));
    if (kind == ModelKind::multilevel)
      return (sigma_hat - sigma_true).cwiseAbs().sum() / static_cast<double>(k * k);
    if (k < 2) return 0.0;
    double total = 0.0;
    for (Eigen::Index r = 0; r < k; ++r)
      for (Eigen::Index c = 0; c < k; ++c)
        if (r != c) total += std::abs(sigma_hat(r, c) - sigma_true(r, c));
    return total / static_cast<double>(k * (k - 1));
  }
  const auto hat = beta_hat.block(block);
  const auto truth = beta_true.block(block);
  return (hat - truth).cwiseAbs().sum() / static_cast<double>(truth.size());
}

/// Evaluation blocks for a model kind: mean/sigma for multilevel, d/a/sigma
/// for the M2PL (sigma dropped when K = 1, where it has no free entries).
inline std::vector<std::string> ae_blocks(ModelKind kind, Eigen::Index k) {
  if (kind == ModelKind::multilevel) return {"mu", "sigma"};
  if (k < 2) return {"d", "a"};
  return {"d", "a", "sigma"};
}

/// Unweighted mean of the per-block AEs.
inline double block_average_ae(const ParamVector& beta_hat, const ParamVector& beta_true,
                               ModelKind kind, Eigen::Index k) {
  const auto blocks = ae_blocks(kind, k);
  double total = 0.0;
  for (const auto& b : blocks) total += ae(beta_hat, beta_true, b, kind, k);
  return total / static_cast<double>(blocks.size());
}

// ---------------------------------------------------------------------------
// Multi-replication study driver.

struct AlgorithmSpec {
  std::string name;
  OptimizerConfig config;
};

struct TrajectoryReport {
  std::vector<std::string> algorithms;
  std::vector<std::string> blocks;     // includes "avg"
  std::vector<Eigen::Index> epochs;    // shared checkpoint epochs
  // mae[block](algorithm, checkpoint), averaged over completed replications
  std::map<std::string, Eigen::MatrixXd> mae;
  Eigen::MatrixXd mean_seconds;        // (algorithm, checkpoint) wall-clock mean
  Eigen::Index replications = 0;
  Eigen::Index failures = 0;
  std::vector<std::string> failure_notes;
  std::vector<std::uint64_t> dataset_seeds;
  std::vector<std::uint64_t> run_seeds;
};

namespace harness_detail {

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t purpose, std::uint64_t r) {
  RngStream stream(master, StreamDomain::generic, purpose, r);
  return stream.next_u64();
}

}  // namespace harness_detail

/// Runs every algorithm on R freshly simulated datasets from shared initial
/// values and aggregates per-checkpoint MAEs. All algorithm configs must
/// agree on max_epochs and checkpoint_stride so trajectories align; the
/// windowed stop rule is disabled for alignment.
inline TrajectoryReport replicate(const SimSetting& setting,
                                  const std::vector<AlgorithmSpec>& algorithms, Eigen::Index r_reps,
                                  std::uint64_t master_seed, int workers = 1) {
  if (algorithms.empty()) throw ConfigError("replicate needs at least one algorithm");
  if (r_reps < 1) throw ConfigError("replicate needs R >= 1");
  const Eigen::Index max_epochs = algorithms.front().config.max_epochs;
  const Eigen::Index stride = algorithms.front().config.checkpoint_stride;
  for (const auto& algo : algorithms)
    if (algo.config.max_epochs != max_epochs || algo.config.checkpoint_stride != stride)
      throw ConfigError("all algorithms must share max_epochs and checkpoint_stride");

  TrajectoryReport report;
  for (const auto& algo : algorithms) report.algorithms.push_back(algo.name);
  report.blocks = ae_blocks(setting.kind, setting.k);
  report.blocks.push_back("avg");
  for (Eigen::Index e = 0; e <= max_epochs; ++e)
    if (e == 0 || e % stride == 0 || e == max_epochs) report.epochs.push_back(e);
  const Eigen::Index n_checkpoints = static_cast<Eigen::Index>(report.epochs.size());
  const Eigen::Index n_algos = static_cast<Eigen::Index>(algorithms.size());

  for (Eigen::Index r = 0; r < r_reps; ++r) {
    report.dataset_seeds.push_back(harness_detail::derive_seed(master_seed, 1, r));
    report.run_seeds.push_back(harness_detail::derive_seed(master_seed, 2, r));
  }

  // ae_store[r] is one matrix per block of shape (algorithm, checkpoint);
  // cells hold NaN when that replication failed.
  std::vector<std::map<std::string, Eigen::MatrixXd>> ae_store(static_cast<std::size_t>(r_reps));
  std::vector<Eigen::MatrixXd> seconds_store(static_cast<std::size_t>(r_reps));
  std::vector<std::string> notes(static_cast<std::size_t>(r_reps));

  parallel_for(static_cast<std::size_t>(r_reps), workers, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      auto& cells = ae_store[r];
      for (const auto& block : report.blocks)
        cells[block] = Eigen::MatrixXd::Constant(n_algos, n_checkpoints,
                                                 std::numeric_limits<double>::quiet_NaN());
      seconds_store[r] = Eigen::MatrixXd::Zero(n_algos, n_checkpoints);

      const SimulatedData sim =
          simulate_dataset(setting, report.dataset_seeds[r]);
      const auto model = make_model(sim.dataset);
      const InitialValues init = initial_values_simulation(
          sim.dataset, sim.true_beta, sim.true_xi, report.dataset_seeds[r] ^ 0x5EEDULL);

      for (Eigen::Index algo = 0; algo < n_algos; ++algo) {
        OptimizerConfig config = algorithms[static_cast<std::size_t>(algo)].config;
        config.seed = report.run_seeds[r];
        config.stop.reset();
        config.workers = 1;
        try {
          const FitResult fit = run(*model, init.beta, init.xi, config);
          if (fit.diverged()) {
            notes[r] += report.algorithms[static_cast<std::size_t>(algo)] + ": " +
                        fit.diagnostic + "; ";
            continue;
          }
          if (static_cast<Eigen::Index>(fit.checkpoints.size()) != n_checkpoints) {
            notes[r] += report.algorithms[static_cast<std::size_t>(algo)] +
                        ": checkpoint misalignment; ";
            continue;
          }
          for (Eigen::Index c = 0; c < n_checkpoints; ++c) {
            const auto& cp = fit.checkpoints[static_cast<std::size_t>(c)];
            const ParamVector hat(cp.beta, model->layout());
            double total = 0.0;
            for (const auto& block : ae_blocks(setting.kind, setting.k)) {
              const double value = ae(hat, sim.true_beta, block, setting.kind, setting.k);
              cells[block](algo, c) = value;
              total += value;
            }
            cells["avg"](algo, c) =
                total / static_cast<double>(ae_blocks(setting.kind, setting.k).size());
            seconds_store[r](algo, c) = cp.seconds;
          }
        } catch (const DivergenceError& err) {
          notes[r] +=
              report.algorithms[static_cast<std::size_t>(algo)] + ": " + err.what() + "; ";
        }
      }
    }
  });

  for (const auto& block : report.blocks)
    report.mae[block] = Eigen::MatrixXd::Zero(n_algos, n_checkpoints);
  report.mean_seconds = Eigen::MatrixXd::Zero(n_algos, n_checkpoints);
  double completed = 0.0;
  for (Eigen::Index r = 0; r < r_reps; ++r) {
    const auto& cells = ae_store[static_cast<std::size_t>(r)];
    const bool complete = cells.at("avg").allFinite();
    if (!complete) {
      ++report.failures;
      if (!notes[static_cast<std::size_t>(r)].empty())
        report.failure_notes.push_back("replication " + std::to_string(r) + ": " +
                                       notes[static_cast<std::size_t>(r)]);
      continue;
    }
    for (const auto& block : report.blocks) report.mae[block] += cells.at(block);
    report.mean_seconds += seconds_store[static_cast<std::size_t>(r)];
    completed += 1.0;
  }
  if (completed == 0.0) throw DivergenceError("every replication failed");
  for (const auto& block : report.blocks) report.mae[block] /= completed;
  report.mean_seconds /= completed;
  report.replications = static_cast<Eigen::Index>(completed);
  return report;
}

}  // namespace somala
