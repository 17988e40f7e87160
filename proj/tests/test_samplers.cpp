#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "somala/samplers.hpp"
#include "test_util.hpp"

using namespace somala;

namespace {

/// M2PL with a single never-informative item (all loadings zero): the
/// posterior of xi is exactly the N(0, I_K) prior.
struct PriorOnlyTarget {
  M2plModel model;
  ParamVector beta;
  ParamCache cache;

  explicit PriorOnlyTarget(Eigen::Index K)
      : model(make_data(K)), beta(make_beta(model, K)), cache(model.make_cache(beta)) {}

  static M2plData make_data(Eigen::Index K) {
    M2plData d;
    d.Q = Eigen::MatrixXi::Ones(1, K);
    d.Y = Eigen::MatrixXd::Ones(1, 1);
    return d;
  }
  static ParamVector make_beta(const M2plModel& m, Eigen::Index K) {
    ParamVector b = ParamVector::zeros(m.layout());
    Eigen::Index idx = 0;
    auto chol = b.block("chol");
    for (Eigen::Index r = 0; r < K; ++r)
      for (Eigen::Index c = 0; c <= r; ++c) chol(idx++) = (r == c) ? 1.0 : 0.0;
    return b;
  }
};

struct BatchMoments {
  Eigen::VectorXd mean;
  Eigen::MatrixXd second_moment;
  Eigen::VectorXd mean_se;
  Eigen::MatrixXd second_se;
};

/// Batch-means estimate of chain mean and second moments with standard errors.
BatchMoments chain_moments(const std::vector<Eigen::VectorXd>& draws, int n_batches) {
  const Eigen::Index k = draws.front().size();
  const std::size_t batch_len = draws.size() / static_cast<std::size_t>(n_batches);
  std::vector<Eigen::VectorXd> batch_mean;
  std::vector<Eigen::MatrixXd> batch_m2;
  for (int b = 0; b < n_batches; ++b) {
    Eigen::VectorXd m = Eigen::VectorXd::Zero(k);
    Eigen::MatrixXd s = Eigen::MatrixXd::Zero(k, k);
    for (std::size_t t = 0; t < batch_len; ++t) {
      const auto& x = draws[static_cast<std::size_t>(b) * batch_len + t];
      m += x;
      s += x * x.transpose();
    }
    batch_mean.push_back(m / static_cast<double>(batch_len));
    batch_m2.push_back(s / static_cast<double>(batch_len));
  }
  BatchMoments out;
  out.mean = Eigen::VectorXd::Zero(k);
  out.second_moment = Eigen::MatrixXd::Zero(k, k);
  for (int b = 0; b < n_batches; ++b) {
    out.mean += batch_mean[static_cast<std::size_t>(b)];
    out.second_moment += batch_m2[static_cast<std::size_t>(b)];
  }
  out.mean /= n_batches;
  out.second_moment /= n_batches;
  Eigen::VectorXd mean_var = Eigen::VectorXd::Zero(k);
  Eigen::MatrixXd m2_var = Eigen::MatrixXd::Zero(k, k);
  for (int b = 0; b < n_batches; ++b) {
    mean_var += (batch_mean[static_cast<std::size_t>(b)] - out.mean).cwiseAbs2();
    m2_var += (batch_m2[static_cast<std::size_t>(b)] - out.second_moment).cwiseAbs2();
  }
  const double denom = static_cast<double>(n_batches) * (n_batches - 1.0);
  out.mean_se = (mean_var / denom).cwiseSqrt();
  out.second_se = (m2_var / denom).cwiseSqrt();
  return out;
}

}  // namespace

TEST_CASE("mala transition density at the drift mean", "[samplers]") {
  PriorOnlyTarget target(2);
  RngStream rng(5);
  const double h = 0.07;
  for (int rep = 0; rep < 10; ++rep) {
    const Eigen::VectorXd xi = rng.normal_vector(2);
    const Eigen::VectorXd drift_point = xi - h * target.model.grad_latent(target.cache, 0, xi);
    const double got = mala_log_q(target.model, target.cache, 0, xi, drift_point, h);
    REQUIRE(got == Catch::Approx(-std::log(4.0 * std::numbers::pi * h)).epsilon(1e-13));
  }
}

TEST_CASE("mala detailed balance identity", "[samplers]") {
  PriorOnlyTarget target(2);
  RngStream rng(17);
  const double h = 0.1;
  auto log_pi = [&](const Eigen::VectorXd& x) {
    return target.model.complete_data_loglik(target.cache, 0, x);
  };
  for (int rep = 0; rep < 200; ++rep) {
    const Eigen::VectorXd a = rng.normal_vector(2);
    const Eigen::VectorXd b = rng.normal_vector(2);
    const double fwd = log_pi(a) + mala_log_q(target.model, target.cache, 0, a, b, h) +
                       mala_log_alpha(target.model, target.cache, 0, a, b, h);
    const double rev = log_pi(b) + mala_log_q(target.model, target.cache, 0, b, a, h) +
                       mala_log_alpha(target.model, target.cache, 0, b, a, h);
    REQUIRE(fwd == Catch::Approx(rev).margin(1e-12));
    REQUIRE(mala_log_alpha(target.model, target.cache, 0, a, b, h) <= 0.0);
  }
}

TEST_CASE("rwmh acceptance ratio is the density ratio", "[samplers]") {
  PriorOnlyTarget target(3);
  RngStream rng(19);
  SECTION("equal densities always accept") {
    const Eigen::VectorXd a = rng.normal_vector(3);
    REQUIRE(rwmh_log_alpha(target.model, target.cache, 0, a, a) == 0.0);
    REQUIRE(rwmh_log_alpha(target.model, target.cache, 0, a, -a) ==
            Catch::Approx(0.0).margin(1e-13));
  }
  SECTION("vanishing noise accepts") {
    const Eigen::VectorXd xi = rng.normal_vector(3);
    RngStream step_rng(23);
    const KernelOutcome out = rwmh_step(target.model, target.cache, 0, xi, 1e-28, step_rng);
    REQUIRE(out.accepted);
    REQUIRE(out.log_alpha > -1e-10);
    REQUIRE((out.new_xi - xi).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("kernel draw consumption: one Gaussian vector plus one uniform", "[samplers]") {
  PriorOnlyTarget target(3);
  const Eigen::VectorXd xi = Eigen::VectorXd::Constant(3, 0.4);

  for (const auto kind : {SamplerKind::mala, SamplerKind::rwmh}) {
    RngStream through(99, StreamDomain::kernel, 1, 2);
    RngStream mirror(99, StreamDomain::kernel, 1, 2);
    SamplerConfig cfg;
    cfg.kind = kind;
    kernel_step(target.model, target.cache, 0, xi, cfg, through);
    mirror.normal_vector(3);
    mirror.uniform();
    REQUIRE(through.next_u64() == mirror.next_u64());
  }
}

TEST_CASE("rejected moves leave the state bit-identical", "[samplers]") {
  PriorOnlyTarget target(2);
  Eigen::VectorXd xi = Eigen::VectorXd::Constant(2, 2.5);
  RngStream rng(31);
  int rejections = 0;
  for (int t = 0; t < 2000; ++t) {
    const KernelOutcome out = mala_step(target.model, target.cache, 0, xi, 0.4, rng);
    if (!out.accepted) {
      ++rejections;
      REQUIRE(out.new_xi == xi);
    }
    xi = out.new_xi;
  }
  REQUIRE(rejections > 0);
}

TEST_CASE("long-run moments on the prior-only target", "[samplers]") {
  PriorOnlyTarget target(2);
  const int steps = 50000;
  for (const auto kind : {SamplerKind::mala, SamplerKind::rwmh}) {
    SamplerConfig cfg;
    cfg.kind = kind;
    cfg.h = 0.1;
    cfg.sigma2 = 0.3;
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(2);
    std::vector<Eigen::VectorXd> draws;
    draws.reserve(steps);
    RngStream rng(kind == SamplerKind::mala ? 1301 : 1302);
    for (int t = 0; t < steps; ++t) {
      xi = kernel_step(target.model, target.cache, 0, xi, cfg, rng).new_xi;
      draws.push_back(xi);
    }
    const BatchMoments m = chain_moments(draws, 100);
    for (Eigen::Index k = 0; k < 2; ++k) REQUIRE(std::abs(m.mean(k)) < 3.5 * m.mean_se(k));
    for (Eigen::Index r = 0; r < 2; ++r)
      for (Eigen::Index c = 0; c < 2; ++c) {
        const double want = r == c ? 1.0 : 0.0;
        REQUIRE(std::abs(m.second_moment(r, c) - want) < 3.5 * m.second_se(r, c));
      }
  }
}

TEST_CASE("acceptance indicator calibration against log_alpha", "[samplers]") {
  PriorOnlyTarget target(2);
  RngStream rng(47);
  Eigen::VectorXd xi = Eigen::VectorXd::Zero(2);
  const int steps = 100000;
  std::vector<double> alphas;
  std::vector<int> accepts;
  for (int t = 0; t < steps; ++t) {
    const KernelOutcome out = mala_step(target.model, target.cache, 0, xi, 0.35, rng);
    alphas.push_back(std::exp(out.log_alpha));
    accepts.push_back(out.accepted ? 1 : 0);
    xi = out.new_xi;
  }
  // Decile bins on alpha: the z^2 sum should behave like chi-square(10).
  std::vector<std::size_t> order(alphas.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return alphas[a] < alphas[b]; });
  double chi2 = 0.0;
  const std::size_t bin = alphas.size() / 10;
  for (int b = 0; b < 10; ++b) {
    double expected = 0.0, variance = 0.0, observed = 0.0;
    for (std::size_t i = 0; i < bin; ++i) {
      const std::size_t idx = order[static_cast<std::size_t>(b) * bin + i];
      expected += alphas[idx];
      variance += alphas[idx] * (1.0 - alphas[idx]);
      observed += accepts[idx];
    }
    if (variance < 1e-9) continue;
    const double z = (observed - expected) / std::sqrt(variance);
    chi2 += z * z;
  }
  REQUIRE(chi2 < 35.0);  // chi-square(10) 99.99% quantile is 35.56
}

TEST_CASE("mala acceptance rate decreases in h", "[samplers]") {
  PriorOnlyTarget target(2);
  const double grid[4] = {0.01, 0.05, 0.1, 0.2};
  double rates[4];
  for (int g = 0; g < 4; ++g) {
    RngStream rng(800 + g);
    Eigen::VectorXd xi = Eigen::VectorXd::Zero(2);
    int acc = 0;
    const int steps = 100000;
    for (int t = 0; t < steps; ++t) {
      const KernelOutcome out = mala_step(target.model, target.cache, 0, xi, grid[g], rng);
      acc += out.accepted ? 1 : 0;
      xi = out.new_xi;
    }
    rates[g] = static_cast<double>(acc) / steps;
  }
  REQUIRE(rates[0] > rates[1]);
  REQUIRE(rates[1] > rates[2]);
  REQUIRE(rates[2] > rates[3]);
}

TEST_CASE("sweep updates listed rows only and is reproducible", "[samplers]") {
  RngStream data_rng(61);
  M2plModel model(test_util::random_m2pl_data(8, 4, 2, data_rng));
  const ParamVector beta = model.project(test_util::random_params(model, data_rng));
  const ParamCache cache = model.make_cache(beta);
  LatentState base = LatentState::Zero(8, 2);
  for (Eigen::Index i = 0; i < 8; ++i) base.row(i) = data_rng.normal_vector(2).transpose();

  SamplerConfig cfg;
  cfg.kind = SamplerKind::mala;
  cfg.h = 0.05;

  SECTION("empty index set is a no-op") {
    LatentState xi = base;
    REQUIRE(sweep(model, cache, xi, {}, cfg, 7, 1) == 0);
    REQUIRE(xi == base);
  }

  SECTION("untouched rows stay bit-identical") {
    LatentState xi = base;
    sweep(model, cache, xi, {1, 4, 6}, cfg, 7, 1);
    for (const Eigen::Index i : {0, 2, 3, 5, 7}) REQUIRE(xi.row(i) == base.row(i));
  }

  SECTION("tiny step accepts everywhere with O(sqrt(h)) moves") {
    LatentState xi = base;
    SamplerConfig small = cfg;
    small.h = 1e-10;
    std::vector<Eigen::Index> all{0, 1, 2, 3, 4, 5, 6, 7};
    REQUIRE(sweep(model, cache, xi, all, small, 7, 1) == 8);
    REQUIRE((xi - base).cwiseAbs().maxCoeff() < 1e-3);
    REQUIRE((xi - base).cwiseAbs().maxCoeff() > 0.0);
  }

  SECTION("identical seeds give bit-identical sweeps at any worker count") {
    std::vector<Eigen::Index> subset{0, 2, 3, 5, 7};
    LatentState a = base;
    LatentState b = base;
    LatentState c = base;
    const Eigen::Index acc_a = sweep(model, cache, a, subset, cfg, 99, 3, 1);
    const Eigen::Index acc_b = sweep(model, cache, b, subset, cfg, 99, 3, 2);
    const Eigen::Index acc_c = sweep(model, cache, c, subset, cfg, 99, 3, 4);
    REQUIRE(a == b);
    REQUIRE(a == c);
    REQUIRE(acc_a == acc_b);
    REQUIRE(acc_a == acc_c);
  }
}
