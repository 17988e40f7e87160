#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>

#include "somala/harness.hpp"
#include "test_util.hpp"

using namespace somala;

namespace {

OptimizerConfig small_mala_config(Eigen::Index batch, Eigen::Index epochs) {
  OptimizerConfig cfg;
  cfg.sampler.kind = SamplerKind::mala;
  cfg.sampler.h = 0.1;
  cfg.batch_size = batch;
  cfg.max_epochs = epochs;
  cfg.seed = 11;
  cfg.block_rescale["chol"] = 0.05;  // study default for multilevel minibatch runs
  return cfg;
}

}  // namespace

TEST_CASE("ae block formulas", "[harness]") {
  SECTION("zero error at the truth") {
    SimSetting setting = SimSetting::preset("m2pl-k5");
    setting.n = 20;
    const SimulatedData sim = simulate_dataset(setting, 3);
    for (const auto& block : ae_blocks(ModelKind::m2pl, 5))
      REQUIRE(ae(sim.true_beta, sim.true_beta, block, ModelKind::m2pl, 5) == 0.0);
    REQUIRE(block_average_ae(sim.true_beta, sim.true_beta, ModelKind::m2pl, 5) == 0.0);
  }

  SECTION("multilevel sigma error averages all K^2 entries") {
    SimSetting setting = SimSetting::preset("multilevel-k5");
    setting.n = 5;
    setting.k = 2;
    setting.j = 4;
    Eigen::VectorXd mu(2);
    mu << 0.3, 0.7;
    setting.true_mu = mu;
    const SimulatedData sim = simulate_dataset(setting, 5);

    // Perturb Sigma by +0.01 on every entry via a fresh factorization.
    const Eigen::MatrixXd sigma =
        sigma_from_chol(chol_unpack(sim.true_beta.block("chol"), 2));
    ParamVector hat = sim.true_beta;
    hat.block("chol") =
        chol_pack(cholesky_factor(sigma + Eigen::MatrixXd::Constant(2, 2, 0.01)));
    REQUIRE(ae(hat, sim.true_beta, "sigma", ModelKind::multilevel, 2) ==
            Catch::Approx(0.01).margin(1e-12));
    REQUIRE(ae(hat, sim.true_beta, "mu", ModelKind::multilevel, 2) == 0.0);
  }

  SECTION("m2pl sigma error uses off-diagonal entries only") {
    // K=2 correlation matrices with off-diagonals 0.5 and 0.6.
    auto corr_chol = [](double rho) {
      Eigen::MatrixXd sigma(2, 2);
      sigma << 1.0, rho, rho, 1.0;
      return chol_pack(cholesky_factor(sigma));
    };
    M2plData data;
    data.Q = Eigen::MatrixXi::Ones(2, 2);
    data.Y = Eigen::MatrixXd::Zero(1, 2);
    M2plModel model(data);
    ParamVector truth = ParamVector::zeros(model.layout());
    truth.block("chol") = corr_chol(0.5);
    ParamVector hat = truth;
    hat.block("chol") = corr_chol(0.6);
    REQUIRE(ae(hat, truth, "sigma", ModelKind::m2pl, 2) ==
            Catch::Approx(0.1).margin(1e-12));
  }

  SECTION("layout mismatch is rejected") {
    RngStream rng(7);
    M2plModel a(test_util::random_m2pl_data(3, 4, 2, rng));
    M2plModel b(test_util::random_m2pl_data(3, 5, 2, rng));
    const ParamVector pa = test_util::random_params(a, rng);
    const ParamVector pb = test_util::random_params(b, rng);
    REQUIRE_THROWS_AS(ae(pa, pb, "d", ModelKind::m2pl, 2), ConfigError);
  }
}

TEST_CASE("tune picks the smallest averaged NCLL with deterministic tie-break",
          "[harness]") {
  SimSetting setting = SimSetting::preset("m2pl-k5");
  setting.n = 60;
  setting.j = 9;
  setting.k = 3;
  setting.q_mode = QMode::simple;
  const SimulatedData sim = simulate_dataset(setting, 41);
  const auto model = make_model(sim.dataset);
  const InitialValues init =
      initial_values_simulation(sim.dataset, sim.true_beta, sim.true_xi, 42);

  OptimizerConfig base = small_mala_config(20, 30);

  SECTION("single candidate is returned regardless of trajectory") {
    TuneSpec spec;
    spec.candidates = {0.07};
    spec.tune_epochs = 10;
    spec.tail_epochs = 5;
    const TuneReport report = tune(*model, init.beta, init.xi, base, spec);
    REQUIRE(report.chosen == 0.07);
    REQUIRE(report.candidates.size() == 1);
  }

  SECTION("identical candidates break ties toward the smaller value") {
    TuneSpec spec;
    spec.candidates = {0.09, 0.09};
    spec.tune_epochs = 10;
    spec.tail_epochs = 5;
    const TuneReport report = tune(*model, init.beta, init.xi, base, spec);
    REQUIRE(report.chosen == 0.09);
    REQUIRE(report.candidates[0].avg_ncll == report.candidates[1].avg_ncll);
  }

  SECTION("default grids match the study candidates") {
    REQUIRE(TuneSpec::default_candidates(SamplerKind::mala) ==
            std::vector<double>{0.01, 0.05, 0.1, 0.2});
    REQUIRE(TuneSpec::default_candidates(SamplerKind::rwmh) ==
            std::vector<double>{0.1, 0.2, 0.3, 0.4});
  }

  SECTION("tune is deterministic given seeds") {
    TuneSpec spec;
    spec.candidates = {0.05, 0.1};
    spec.tune_epochs = 12;
    spec.tail_epochs = 4;
    const TuneReport a = tune(*model, init.beta, init.xi, base, spec);
    const TuneReport b = tune(*model, init.beta, init.xi, base, spec);
    REQUIRE(a.chosen == b.chosen);
    for (std::size_t c = 0; c < a.candidates.size(); ++c)
      REQUIRE(a.candidates[c].avg_ncll == b.candidates[c].avg_ncll);
  }
}

TEST_CASE("replicate aggregates aligned trajectories", "[harness]") {
  SimSetting setting = SimSetting::preset("multilevel-k5");
  setting.n = 40;
  setting.j = 5;
  setting.k = 2;
  Eigen::VectorXd mu(2);
  mu << 0.3, 1.06;
  setting.true_mu = mu;

  std::vector<AlgorithmSpec> algos;
  algos.push_back({"d-somala", small_mala_config(10, 6)});
  OptimizerConfig rwmh = small_mala_config(10, 6);
  rwmh.sampler.kind = SamplerKind::rwmh;
  rwmh.sampler.sigma2 = 0.3;
  algos.push_back({"d-somh", rwmh});

  const TrajectoryReport report = replicate(setting, algos, 3, 99);

  REQUIRE(report.algorithms == std::vector<std::string>{"d-somala", "d-somh"});
  REQUIRE(report.blocks == std::vector<std::string>{"mu", "sigma", "avg"});
  REQUIRE(report.epochs.front() == 0);
  REQUIRE(report.epochs.back() == 6);
  REQUIRE(report.replications == 3);
  REQUIRE(report.failures == 0);

  SECTION("checkpoint-0 errors are identical across algorithms") {
    for (const auto& block : report.blocks)
      REQUIRE(report.mae.at(block)(0, 0) == report.mae.at(block)(1, 0));
  }

  SECTION("avg block is the unweighted mean of the others") {
    for (Eigen::Index c = 0; c < static_cast<Eigen::Index>(report.epochs.size()); ++c)
      for (Eigen::Index a = 0; a < 2; ++a)
        REQUIRE(report.mae.at("avg")(a, c) ==
                Catch::Approx((report.mae.at("mu")(a, c) + report.mae.at("sigma")(a, c)) / 2.0)
                    .epsilon(1e-14));
  }

  SECTION("single replication equals that run's AE trace") {
    const TrajectoryReport one = replicate(setting, {algos[0]}, 1, 99);
    const SimulatedData sim = simulate_dataset(setting, one.dataset_seeds[0]);
    const auto model = make_model(sim.dataset);
    const InitialValues init = initial_values_simulation(sim.dataset, sim.true_beta, sim.true_xi,
                                                         one.dataset_seeds[0] ^ 0x5EEDULL);
    OptimizerConfig config = algos[0].config;
    config.seed = one.run_seeds[0];
    const FitResult fit = run(*model, init.beta, init.xi, config);
    for (std::size_t c = 0; c < fit.checkpoints.size(); ++c) {
      const ParamVector hat(fit.checkpoints[c].beta, model->layout());
      REQUIRE(one.mae.at("mu")(0, static_cast<Eigen::Index>(c)) ==
              ae(hat, sim.true_beta, "mu", setting.kind, setting.k));
    }
  }

  SECTION("replication order does not change the aggregate") {
    const TrajectoryReport again = replicate(setting, algos, 3, 99, 2);
    for (const auto& block : report.blocks)
      REQUIRE(report.mae.at(block) == again.mae.at(block));
  }

  SECTION("mismatched epoch grids are rejected") {
    std::vector<AlgorithmSpec> bad = algos;
    bad[1].config.max_epochs = 7;
    REQUIRE_THROWS_AS(replicate(setting, bad, 2, 1), ConfigError);
  }
}
