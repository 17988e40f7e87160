#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "somala/chol.hpp"
#include "somala/dataset.hpp"
#include "somala/errors.hpp"
#include "somala/model.hpp"
#include "somala/rng.hpp"

namespace somala {

enum class QMode { design, simple, custom };

/// One simulation-study condition. The named presets reproduce the four
/// study settings; custom shapes are accepted through the same struct.
struct SimSetting {
  ModelKind kind = ModelKind::multilevel;
  Eigen::Index n = 10000;
  Eigen::Index j = 10;  // items, or level-1 units per level-2 unit
  Eigen::Index k = 5;
  QMode q_mode = QMode::design;
  std::optional<Eigen::MatrixXi> custom_q;
  std::uint64_t q_seed = 0;  // three-factor rows of the built-in design
  double sigma_diag = 0.1;
  double sigma_offdiag = 0.05;
  std::optional<Eigen::VectorXd> true_mu;  // multilevel fixed effects

  static SimSetting preset(const std::string& name);
};

struct SimulatedData {
  Dataset dataset;
  ParamVector true_beta;
  LatentState true_xi;
};

struct InitialValues {
  ParamVector beta;
  LatentState xi;
};

namespace simulate_detail {

inline Eigen::VectorXd preset_mu(Eigen::Index k) {
  Eigen::VectorXd mu(10);
  mu << 0.300, 1.060, 0.950, 0.129, 0.826, 0.857, 0.193, 0.809, 0.844, 0.301;
  return mu.head(k);
}

inline std::vector<std::vector<int>> combinations(Eigen::Index k, int choose) {
  std::vector<std::vector<int>> all;
  std::vector<int> current;
  const auto recurse = [&](auto&& self, int start) -> void {
    if (static_cast<int>(current.size()) == choose) {
      all.push_back(current);
      return;
    }
    for (int c = start; c < static_cast<int>(k); ++c) {
      current.push_back(c);
      self(self, c + 1);
      current.pop_back();
    }
  };
  recurse(recurse, 0);
  return all;
}

}  // namespace simulate_detail

/// The study's indicator design: three identity blocks, three copies of all
/// two-factor row patterns, then rows drawn without replacement from the
/// three-factor patterns to fill J rows.
inline Eigen::MatrixXi build_q_design(Eigen::Index j, Eigen::Index k, std::uint64_t q_seed) {
  const auto pairs = simulate_detail::combinations(k, 2);
  const auto triples = simulate_detail::combinations(k, 3);
  const Eigen::Index base = 3 * k + 3 * static_cast<Eigen::Index>(pairs.size());
  const Eigen::Index extra = j - base;
  if (extra < 0 || extra > static_cast<Eigen::Index>(triples.size()))
    throw ConfigError("the built-in Q design cannot produce J=" + std::to_string(j) +
                      " rows for K=" + std::to_string(k));
  Eigen::MatrixXi q = Eigen::MatrixXi::Zero(j, k);
  Eigen::Index row = 0;
  for (int copy = 0; copy < 3; ++copy)
    for (Eigen::Index f = 0; f < k; ++f) q(row++, f) = 1;
  for (int copy = 0; copy < 3; ++copy)
    for (const auto& pattern : pairs) {
      for (const int f : pattern) q(row, f) = 1;
      ++row;
    }
  RngStream rng(q_seed, StreamDomain::simulate, 0x71);
  std::vector<std::size_t> order(triples.size());
  for (std::size_t t = 0; t < order.size(); ++t) order[t] = t;
  for (Eigen::Index t = 0; t < extra; ++t) {
    const std::size_t swap_with =
        static_cast<std::size_t>(t) +
        static_cast<std::size_t>(rng.uniform_index(order.size() - static_cast<std::size_t>(t)));
    std::swap(order[static_cast<std::size_t>(t)], order[swap_with]);
    for (const int f : triples[order[static_cast<std::size_t>(t)]]) q(row, f) = 1;
    ++row;
  }
  return q;
}

/// Simple structure: item j measures factor j mod K only.
inline Eigen::MatrixXi build_q_simple(Eigen::Index j, Eigen::Index k) {
  Eigen::MatrixXi q = Eigen::MatrixXi::Zero(j, k);
  for (Eigen::Index r = 0; r < j; ++r) q(r, r % k) = 1;
  return q;
}

inline SimSetting SimSetting::preset(const std::string& name) {
  SimSetting s;
  if (name == "multilevel-k5") {
    s.kind = ModelKind::multilevel;
    s.n = 10000;
    s.j = 10;
    s.k = 5;
  } else if (name == "multilevel-k10") {
    s.kind = ModelKind::multilevel;
    s.n = 10000;
    s.j = 20;
    s.k = 10;
  } else if (name == "m2pl-k5") {
    s.kind = ModelKind::m2pl;
    s.n = 10000;
    s.j = 50;
    s.k = 5;
    s.sigma_diag = 1.0;
    s.sigma_offdiag = 0.5;
  } else if (name == "m2pl-k10") {
    s.kind = ModelKind::m2pl;
    s.n = 10000;
    s.j = 200;
    s.k = 10;
    s.sigma_diag = 1.0;
    s.sigma_offdiag = 0.5;
  } else {
    throw ConfigError("unknown simulation setting: " + name);
  }
  if (s.kind == ModelKind::multilevel) s.true_mu = simulate_detail::preset_mu(s.k);
  return s;
}

inline Eigen::MatrixXi resolve_q(const SimSetting& setting) {
  if (setting.custom_q) return *setting.custom_q;
  if (setting.k == 1 || setting.q_mode == QMode::simple)
    return build_q_simple(setting.j, setting.k);
  return build_q_design(setting.j, setting.k, setting.q_seed);
}

/// Generates one dataset with its true parameters and latent draws.
/// Bit-identical for identical (setting, seed).
inline SimulatedData simulate_dataset(const SimSetting& setting, std::uint64_t seed) {
  if (setting.n < 1 || setting.j < 1 || setting.k < 1)
    throw ConfigError("simulation setting needs positive N, J, K");

  const Eigen::Index n = setting.n;
  const Eigen::Index j = setting.j;
  const Eigen::Index k = setting.k;

  Eigen::MatrixXd sigma_true(k, k);
  sigma_true.setConstant(setting.sigma_offdiag);
  sigma_true.diagonal().setConstant(setting.sigma_diag);
  const Eigen::MatrixXd chol_true = cholesky_factor(sigma_true);

  RngStream item_rng(seed, StreamDomain::simulate, 1);
  RngStream covariate_rng(seed, StreamDomain::simulate, 2);
  RngStream latent_rng(seed, StreamDomain::simulate, 3);
  RngStream response_rng(seed, StreamDomain::simulate, 4);

  SimulatedData out;
  out.true_xi.resize(n, k);

  if (setting.kind == ModelKind::multilevel) {
    Eigen::VectorXd mu = setting.true_mu ? *setting.true_mu : simulate_detail::preset_mu(k);
    if (mu.size() != k) throw ConfigError("true mean vector length does not match K");

    // Covariate correlation 0.25 off-diagonal for the non-intercept columns.
    Eigen::MatrixXd cov_chol;
    if (k > 1) {
      Eigen::MatrixXd c = Eigen::MatrixXd::Constant(k - 1, k - 1, 0.25);
      c.diagonal().setOnes();
      cov_chol = cholesky_factor(c);
    }

    MultilevelData data;
    data.K = k;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::MatrixXd X(j, k);
      for (Eigen::Index r = 0; r < j; ++r) {
        X(r, 0) = 1.0;
        if (k > 1)
          X.row(r).tail(k - 1) = (cov_chol * covariate_rng.normal_vector(k - 1)).transpose();
      }
      const Eigen::VectorXd xi = mu + chol_true * latent_rng.normal_vector(k);
      out.true_xi.row(i) = xi.transpose();
      Eigen::VectorXd y(j);
      for (Eigen::Index r = 0; r < j; ++r)
        y(r) = response_rng.uniform() < sigmoid(X.row(r).dot(xi)) ? 1.0 : 0.0;
      data.X.push_back(std::move(X));
      data.y.push_back(std::move(y));
    }
    out.dataset.data = std::move(data);

    MultilevelModel model(out.dataset.multilevel());
    out.true_beta = ParamVector::zeros(model.layout());
    out.true_beta.block("mu") = mu;
    out.true_beta.block("chol") = chol_pack(chol_true);
  } else {
    M2plData data;
    data.Q = resolve_q(setting);
    if (data.Q.rows() != j || data.Q.cols() != k)
      throw ConfigError("Q matrix shape does not match (J, K)");

    Eigen::VectorXd d(j);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(j, k);
    for (Eigen::Index r = 0; r < j; ++r) {
      d(r) = -1.0 + 2.0 * item_rng.uniform();
      for (Eigen::Index f = 0; f < k; ++f)
        if (data.Q(r, f) == 1) a(r, f) = 0.5 + item_rng.uniform();
    }

    data.Y.resize(n, j);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::VectorXd xi = chol_true * latent_rng.normal_vector(k);
      out.true_xi.row(i) = xi.transpose();
      for (Eigen::Index r = 0; r < j; ++r)
        data.Y(i, r) =
            response_rng.uniform() < sigmoid(d(r) + a.row(r).dot(xi)) ? 1.0 : 0.0;
    }
    out.dataset.data = std::move(data);

    M2plModel model(out.dataset.m2pl());
    out.true_beta = ParamVector::zeros(model.layout());
    out.true_beta.block("d") = d;
    auto a_block = out.true_beta.block("a");
    for (Eigen::Index r = 0; r < j; ++r)
      for (Eigen::Index f = 0; f < k; ++f)
        if (model.loading_index(r, f) >= 0) a_block(model.loading_index(r, f)) = a(r, f);
    out.true_beta.block("chol") = chol_pack(chol_true);
  }
  out.dataset.validate();
  return out;
}

/// Study-style initials: latents sign-matched to the truth, Sigma at the
/// identity, and the remaining blocks drawn from the stated distributions.
inline InitialValues initial_values_simulation(const Dataset& dataset,
                                               const ParamVector& true_beta,
                                               const LatentState& true_xi, std::uint64_t seed) {
  RngStream rng(seed, StreamDomain::init);
  const Eigen::Index n = dataset.n();
  const Eigen::Index k = dataset.latent_dim();
  InitialValues init;
  init.xi.resize(n, k);
  const bool multilevel = dataset.kind() == ModelKind::multilevel;
  const double latent_sd = multilevel ? std::sqrt(0.5) : std::sqrt(5.0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index f = 0; f < k; ++f) {
      const double draw = latent_sd * rng.normal();
      const double truth = true_xi(i, f);
      init.xi(i, f) = truth == 0.0 ? draw : std::abs(draw) * (truth > 0.0 ? 1.0 : -1.0);
    }

  if (multilevel) {
    MultilevelModel model(dataset.multilevel());
    init.beta = ParamVector::zeros(model.layout());
    auto mu = init.beta.block("mu");
    for (Eigen::Index f = 0; f < k; ++f) mu(f) = 1.5 * rng.uniform();
    init.beta.block("chol") = chol_pack(Eigen::MatrixXd::Identity(k, k));
  } else {
    M2plModel model(dataset.m2pl());
    (void)true_beta;
    init.beta = ParamVector::zeros(model.layout());
    auto d = init.beta.block("d");
    for (Eigen::Index r = 0; r < d.size(); ++r) d(r) = rng.normal();
    auto a = init.beta.block("a");
    for (Eigen::Index idx = 0; idx < a.size(); ++idx) a(idx) = 2.0 * rng.uniform();
    init.beta.block("chol") = chol_pack(Eigen::MatrixXd::Identity(k, k));
  }
  return init;
}

/// Sum-score initials for the M2PL: standardized per-factor sum scores as
/// latents, zero intercepts, unit loadings, and the latent correlation matrix
/// taken from the initial latents.
inline InitialValues initial_values_sumscore(const Dataset& dataset) {
  if (dataset.kind() != ModelKind::m2pl)
    throw ConfigError("sum-score initialization applies to the M2PL model only");
  const M2plData& data = dataset.m2pl();
  const Eigen::Index n = data.n();
  const Eigen::Index j = data.n_items();
  const Eigen::Index k = data.K();

  for (Eigen::Index f = 0; f < k; ++f)
    if (data.Q.col(f).sum() == 0)
      throw ConfigError("factor " + std::to_string(f + 1) + " is measured by no items");

  InitialValues init;
  init.xi.resize(n, k);
  for (Eigen::Index f = 0; f < k; ++f) {
    Eigen::VectorXd score = Eigen::VectorXd::Zero(n);
    for (Eigen::Index r = 0; r < j; ++r)
      if (data.Q(r, f) == 1) score += data.Y.col(r);
    const double mean = score.mean();
    double sd = std::sqrt((score.array() - mean).square().sum() / (n - 1.0));
    if (sd < 1e-12) sd = 1.0;
    init.xi.col(f) = (score.array() - mean) / sd;
  }

  M2plModel model(data);
  init.beta = ParamVector::zeros(model.layout());
  init.beta.block("a").setOnes();

  Eigen::MatrixXd corr = init.xi.transpose() * init.xi / (n - 1.0);
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c < k; ++c) {
      const double denom = std::sqrt(corr(r, r) * corr(c, c));
      if (r != c) corr(r, c) = denom > 0 ? corr(r, c) / denom : 0.0;
    }
  corr.diagonal().setOnes();
  // Nudge toward the identity until the correlation is safely factorizable.
  for (double ridge = 0.0; ridge <= 0.5; ridge += 0.05) {
    Eigen::MatrixXd candidate = (1.0 - ridge) * corr + ridge * Eigen::MatrixXd::Identity(k, k);
    Eigen::LLT<Eigen::MatrixXd> llt(candidate);
    if (llt.info() == Eigen::Success) {
      init.beta.block("chol") = chol_pack(Eigen::MatrixXd(llt.matrixL()));
      init.beta = model.project(init.beta);
      return init;
    }
  }
  throw DivergenceError("sum-score correlation matrix could not be factorized");
}

}  // namespace somala
