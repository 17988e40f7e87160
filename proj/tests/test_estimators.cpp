#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "somala/estimators.hpp"
#include "test_util.hpp"

using namespace somala;
using test_util::random_m2pl_data;

namespace {

/// K = 1 M2PL instance with responses actually drawn from the model.
struct Oracle1d {
  M2plModel model;
  ParamVector beta;

  static M2plData simulate(Eigen::Index n, Eigen::Index J, const Eigen::VectorXd& d,
                           const Eigen::VectorXd& a, RngStream& rng) {
    M2plData data;
    data.Q = Eigen::MatrixXi::Ones(J, 1);
    data.Y.resize(n, J);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double xi = rng.normal();
      for (Eigen::Index j = 0; j < J; ++j)
        data.Y(i, j) = rng.uniform() < sigmoid(d(j) + a(j) * xi) ? 1.0 : 0.0;
    }
    return data;
  }

  Oracle1d(Eigen::Index n, Eigen::Index J, std::uint64_t seed)
      : model(make(n, J, seed)), beta(ParamVector::zeros(model.layout())) {
    RngStream rng(seed);  // replays the item-parameter draws used by make()
    auto d = beta.block("d");
    auto a = beta.block("a");
    for (Eigen::Index j = 0; j < J; ++j) {
      d(j) = -1.0 + 2.0 * rng.uniform();
      a(j) = 0.5 + rng.uniform();
    }
    beta.block("chol")(0) = 1.0;
  }

 private:
  static M2plData make(Eigen::Index n, Eigen::Index J, std::uint64_t seed) {
    RngStream rng(seed);
    Eigen::VectorXd d(J), a(J);
    for (Eigen::Index j = 0; j < J; ++j) {
      d(j) = -1.0 + 2.0 * rng.uniform();
      a(j) = 0.5 + rng.uniform();
    }
    return simulate(n, J, d, a, rng);
  }
};

}  // namespace

TEST_CASE("gauss_hermite rules integrate exactly", "[estimators]") {
  const QuadratureRule rule = gauss_hermite(21);
  REQUIRE(rule.weights.sum() == Catch::Approx(std::sqrt(std::numbers::pi)).epsilon(1e-12));
  // Moments of N(0,1) through the substitution x = sqrt(2) t.
  double second = 0.0, fourth = 0.0;
  for (Eigen::Index m = 0; m < rule.nodes.size(); ++m) {
    const double x = std::numbers::sqrt2 * rule.nodes(m);
    second += rule.weights(m) * x * x;
    fourth += rule.weights(m) * x * x * x * x;
  }
  second /= std::sqrt(std::numbers::pi);
  fourth /= std::sqrt(std::numbers::pi);
  REQUIRE(second == Catch::Approx(1.0).epsilon(1e-12));
  REQUIRE(fourth == Catch::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("quadrature_loglik_1d", "[estimators]") {
  SECTION("separable integrand matches the closed form") {
    RngStream rng(52);
    M2plData data;
    data.Q = Eigen::MatrixXi::Ones(4, 1);
    data.Y.resize(3, 4);
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) data.Y(i, j) = rng.uniform() < 0.5 ? 1.0 : 0.0;
    M2plModel model(std::move(data));
    ParamVector beta = ParamVector::zeros(model.layout());
    auto d = beta.block("d");
    for (Eigen::Index j = 0; j < 4; ++j) d(j) = rng.normal();
    beta.block("chol")(0) = 1.0;  // loadings stay zero: f(Y|xi) constant in xi

    double closed_form = 0.0;
    for (Eigen::Index i = 0; i < 3; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        const double p = sigmoid(d(j));
        closed_form += model.data().Y(i, j) == 1.0 ? std::log(p) : std::log(1.0 - p);
      }
    const double got =
        quadrature_loglik_1d(model, model.make_cache(beta), gauss_hermite(31));
    REQUIRE(got == Catch::Approx(closed_form).margin(1e-10));
  }

  SECTION("41 and 61 nodes agree on seeded instances") {
    for (std::uint64_t seed : {11ULL, 12ULL, 13ULL}) {
      Oracle1d oracle(40, 8, seed);
      const ParamCache cache = oracle.model.make_cache(oracle.beta);
      const double l41 = quadrature_loglik_1d(oracle.model, cache, gauss_hermite(41));
      const double l61 = quadrature_loglik_1d(oracle.model, cache, gauss_hermite(61));
      REQUIRE(l41 == Catch::Approx(l61).margin(1e-8));
    }
  }

  SECTION("true parameters beat perturbed ones for large N") {
    Oracle1d oracle(1500, 8, 77);
    const QuadratureRule rule = gauss_hermite(41);
    const double at_truth =
        quadrature_loglik_1d(oracle.model, oracle.model.make_cache(oracle.beta), rule);
    RngStream rng(78);
    for (int rep = 0; rep < 5; ++rep) {
      ParamVector perturbed = oracle.beta;
      for (Eigen::Index q = 0; q + 1 < perturbed.dim(); ++q)
        perturbed.values(q) += 0.25 * rng.normal();
      const double at_perturbed =
          quadrature_loglik_1d(oracle.model, oracle.model.make_cache(perturbed), rule);
      REQUIRE(at_truth > at_perturbed);
    }
  }

  SECTION("rejects K > 1") {
    RngStream rng(91);
    M2plModel model(random_m2pl_data(3, 4, 2, rng));
    const ParamVector beta = model.project(test_util::random_params(model, rng));
    REQUIRE_THROWS_AS(
        quadrature_loglik_1d(model, model.make_cache(beta), gauss_hermite(21)),
        ConfigError);
  }
}

TEST_CASE("observed_information recursion and averaging", "[estimators]") {
  SECTION("constant scores reproduce the outer product") {
    Eigen::VectorXd s(3);
    s << 0.5, -1.0, 2.0;
    const Eigen::MatrixXd tilde = s * s.transpose();
    std::vector<Eigen::MatrixXd> seq(8, tilde);
    std::vector<double> gammas;
    for (int t = 1; t <= 8; ++t) gammas.push_back(std::pow(t, -0.51));
    const InfoMatrix info = observed_information(seq, gammas, 3);
    REQUIRE(info.iterations_averaged == 5);
    REQUIRE((info.matrix - tilde).cwiseAbs().maxCoeff() < 1e-14);
  }

  SECTION("zero scores give the zero matrix") {
    std::vector<Eigen::MatrixXd> seq(4, Eigen::MatrixXd::Zero(2, 2));
    const InfoMatrix info = observed_information(seq, {1.0, 0.7, 0.6, 0.5}, 0);
    REQUIRE(info.matrix.cwiseAbs().maxCoeff() == 0.0);
  }

  SECTION("symmetric and PSD on random score sets") {
    RngStream rng(71);
    std::vector<Eigen::MatrixXd> seq;
    std::vector<double> gammas;
    for (int t = 1; t <= 30; ++t) {
      Eigen::MatrixXd scores(6, 4);
      for (Eigen::Index i = 0; i < 6; ++i)
        scores.row(i) = rng.normal_vector(4).transpose();
      seq.push_back(scores.transpose() * scores / 6.0);
      gammas.push_back(std::pow(t, -0.51));
    }
    const InfoMatrix info = observed_information(seq, gammas, 10);
    REQUIRE((info.matrix - info.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-12);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info.matrix);
    REQUIRE(eig.eigenvalues().minCoeff() > -1e-8);
  }

  SECTION("empty post-burn-in trace is rejected") {
    std::vector<Eigen::MatrixXd> seq(2, Eigen::MatrixXd::Zero(1, 1));
    REQUIRE_THROWS_AS(observed_information(seq, {1.0, 0.5}, 2), ConfigError);
  }
}

TEST_CASE("fit_importance_density", "[estimators]") {
  SECTION("degenerate cloud floors to 1e-8 I") {
    Eigen::VectorXd point(2);
    point << 1.5, -0.5;
    std::vector<std::vector<Eigen::VectorXd>> samples{{12, point}};
    const ImportanceDensity density = fit_importance_density(samples, 2.0);
    REQUIRE((density.mean[0] - point).cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((density.cov[0] - 1e-8 * Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() <
            1e-14);
  }

  SECTION("inflation = 1 is a plain moment match") {
    RngStream rng(81);
    std::vector<Eigen::VectorXd> draws;
    for (int t = 0; t < 5000; ++t) draws.push_back(rng.normal_vector(2));
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(2);
    for (const auto& x : draws) mean += x;
    mean /= static_cast<double>(draws.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(2, 2);
    for (const auto& x : draws) cov += (x - mean) * (x - mean).transpose();
    cov /= static_cast<double>(draws.size() - 1);

    const ImportanceDensity density = fit_importance_density({draws}, 1.0);
    REQUIRE((density.mean[0] - mean).cwiseAbs().maxCoeff() < 1e-12);
    REQUIRE((density.cov[0] - cov).cwiseAbs().maxCoeff() < 1e-12);
    // Moment recovery from a known Gaussian: within 3 standard errors.
    const double se_mean = 1.0 / std::sqrt(static_cast<double>(draws.size()));
    REQUIRE(density.mean[0].cwiseAbs().maxCoeff() < 3.0 * se_mean);
    const double se_var = std::sqrt(2.0 / static_cast<double>(draws.size()));
    REQUIRE(std::abs(density.cov[0](0, 0) - 1.0) < 3.0 * se_var);
    REQUIRE(std::abs(density.cov[0](1, 1) - 1.0) < 3.0 * se_var);
  }

  SECTION("too few samples are rejected") {
    std::vector<std::vector<Eigen::VectorXd>> samples{
        {5, Eigen::VectorXd::Zero(2)}};
    REQUIRE_THROWS_AS(fit_importance_density(samples, 2.0), ConfigError);
  }
}

TEST_CASE("is_log_marginal", "[estimators]") {
  SECTION("flat integrand is exact for any T") {
    // Zero loadings: f(Y_i | xi) is constant in xi.
    RngStream rng(83);
    M2plData data;
    data.Q = Eigen::MatrixXi::Ones(3, 1);
    data.Y.resize(2, 3);
    for (Eigen::Index i = 0; i < 2; ++i)
      for (Eigen::Index j = 0; j < 3; ++j) data.Y(i, j) = rng.uniform() < 0.5 ? 1.0 : 0.0;
    M2plModel model(std::move(data));
    ParamVector beta = ParamVector::zeros(model.layout());
    auto d = beta.block("d");
    for (Eigen::Index j = 0; j < 3; ++j) d(j) = rng.normal();
    beta.block("chol")(0) = 1.0;
    const ParamCache cache = model.make_cache(beta);

    ImportanceDensity density;
    density.inflation = 1.0;
    for (Eigen::Index i = 0; i < 2; ++i) {
      density.mean.push_back(Eigen::VectorXd::Zero(1));
      density.cov.push_back(Eigen::MatrixXd::Identity(1, 1));
      density.chol.push_back(Eigen::MatrixXd::Identity(1, 1));
      density.chol_inv.push_back(Eigen::MatrixXd::Identity(1, 1));
      density.log_norm.push_back(-0.5 * std::log(2.0 * std::numbers::pi));
    }

    const LogMarginalEstimate few = is_log_marginal(model, cache, density, 7, 17);
    const LogMarginalEstimate many = is_log_marginal(model, cache, density, 400, 18);
    Eigen::VectorXd xi0 = Eigen::VectorXd::Zero(1);
    for (Eigen::Index i = 0; i < 2; ++i) {
      const double c = model.conditional_loglik(cache, i, xi0);
      REQUIRE(few.per_obs(i) == Catch::Approx(c).margin(1e-12));
      REQUIRE(many.per_obs(i) == Catch::Approx(c).margin(1e-12));
    }
    // Importance density equal to the prior: all weights equal one.
    REQUIRE(few.max_weight_fraction == Catch::Approx(1.0 / 7.0).epsilon(1e-12));
    REQUIRE(few.min_ess == Catch::Approx(7.0).epsilon(1e-12));
  }

  SECTION("matches the quadrature oracle on a K = 1 instance") {
    Oracle1d oracle(60, 8, 311);
    const ParamCache cache = oracle.model.make_cache(oracle.beta);
    const double quad = quadrature_loglik_1d(oracle.model, cache, gauss_hermite(61));

    // Importance density from true-posterior draws via a long MALA run.
    std::vector<std::vector<Eigen::VectorXd>> samples(60);
    RngStream chain_rng(313);
    for (Eigen::Index i = 0; i < 60; ++i) {
      Eigen::VectorXd xi = Eigen::VectorXd::Zero(1);
      for (int t = 0; t < 400; ++t) {
        Eigen::VectorXd prop =
            xi + 0.3 * Eigen::VectorXd::Constant(1, chain_rng.normal());
        const double delta = oracle.model.complete_data_loglik(cache, i, prop) -
                             oracle.model.complete_data_loglik(cache, i, xi);
        if (std::log(chain_rng.uniform()) < delta) xi = prop;
        if (t >= 100) samples[static_cast<std::size_t>(i)].push_back(xi);
      }
    }
    const ImportanceDensity density = fit_importance_density(samples, 2.0);
    const LogMarginalEstimate est = is_log_marginal(oracle.model, cache, density, 4000, 99);
    REQUIRE(std::abs(est.total - quad) < 0.005 * std::abs(quad));
    REQUIRE(est.min_ess > 10.0);
  }

  SECTION("estimator variance halves when T doubles") {
    Oracle1d oracle(15, 5, 271);
    const ParamCache cache = oracle.model.make_cache(oracle.beta);
    std::vector<std::vector<Eigen::VectorXd>> samples(15);
    RngStream chain_rng(272);
    for (auto& s : samples)
      for (int t = 0; t < 40; ++t)
        s.push_back(Eigen::VectorXd::Constant(1, chain_rng.normal()));
    const ImportanceDensity density = fit_importance_density(samples, 2.0);

    auto variance_at = [&](Eigen::Index T, std::uint64_t seed_base) {
      std::vector<double> values;
      for (int rep = 0; rep < 50; ++rep)
        values.push_back(
            is_log_marginal(oracle.model, cache, density, T, seed_base + rep).total);
      double mean = 0.0;
      for (const double v : values) mean += v;
      mean /= values.size();
      double var = 0.0;
      for (const double v : values) var += (v - mean) * (v - mean);
      return var / (values.size() - 1.0);
    };
    const double var_t = variance_at(300, 4000);
    const double var_2t = variance_at(600, 8000);
    const double ratio = var_2t / var_t;
    REQUIRE(ratio > 0.3);
    REQUIRE(ratio < 0.8);
  }
}
