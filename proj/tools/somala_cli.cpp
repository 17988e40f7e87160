// Command-line driver: simulate / tune / fit / replicate / evaluate.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "somala/estimators.hpp"
#include "somala/harness.hpp"
#include "somala/io.hpp"
#include "somala/model.hpp"
#include "somala/optimizer.hpp"
#include "somala/simulate.hpp"

namespace fs = std::filesystem;
using namespace somala;

namespace {

struct GlobalArgs {
  std::uint64_t seed = 1;
  int workers = default_workers();
  std::string out = ".";
};

struct DataArgs {
  std::string data_path;
  std::string q_path;
  std::string model_kind;  // "", "multilevel", "m2pl"
};

struct InitArgs {
  std::string init = "simulation";  // simulation | sumscore | <params.json>
  std::string init_latents;
  std::string true_params;
  std::string true_latents;
};

ModelKind infer_kind(const DataArgs& args) {
  return (!args.q_path.empty() || args.model_kind == "m2pl") ? ModelKind::m2pl
                                                             : ModelKind::multilevel;
}

Dataset load_dataset(const DataArgs& args) {
  if (args.data_path.empty()) throw ConfigError("--data is required");
  Dataset ds;
  const bool m2pl = !args.q_path.empty() || args.model_kind == "m2pl";
  if (m2pl) {
    if (args.q_path.empty()) throw ConfigError("the M2PL model needs --q");
    ds.data = read_m2pl_csv(args.data_path, args.q_path);
    // Constant items are allowed but their intercepts may drift; the run then
    // reports non-convergence instead of erroring up front.
    const M2plData& data = ds.m2pl();
    for (Eigen::Index j = 0; j < data.n_items(); ++j) {
      const double mean = data.Y.col(j).mean();
      if (mean == 0.0 || mean == 1.0)
        std::cerr << "warning: item " << (j + 1)
                  << " was answered identically by all respondents\n";
    }
  } else {
    ds.data = read_multilevel_csv(args.data_path);
  }
  return ds;
}

void collect_input_digests(RunManifest& manifest, std::initializer_list<std::string> paths) {
  for (const auto& path : paths)
    if (!path.empty() && fs::exists(path)) manifest.input_digests[path] = file_digest(path);
}

InitialValues resolve_init(const Dataset& dataset, const LatentModel& model,
                           const InitArgs& args, std::uint64_t seed) {
  if (args.init == "sumscore") return initial_values_sumscore(dataset);
  if (args.init == "simulation") {
    if (args.true_params.empty() || args.true_latents.empty())
      throw ConfigError("--init simulation needs --true-params and --true-latents");
    const ParamVector truth = read_params_json(args.true_params, model);
    const Eigen::MatrixXd xi = read_matrix_csv(args.true_latents);
    if (xi.rows() != model.n_obs() || xi.cols() != model.latent_dim())
      throw ConfigError("true-latent shape does not match the dataset");
    return initial_values_simulation(dataset, truth, xi, seed);
  }
  InitialValues init;
  init.beta = read_params_json(args.init, model);
  if (!args.init_latents.empty()) {
    init.xi = read_matrix_csv(args.init_latents);
    if (init.xi.rows() != model.n_obs() || init.xi.cols() != model.latent_dim())
      throw ConfigError("initial-latent shape does not match the dataset");
  } else {
    init.xi = LatentState::Zero(model.n_obs(), model.latent_dim());
  }
  return init;
}

void apply_model_defaults(OptimizerConfig& config, ModelKind kind, bool avg_start_given,
                          bool rescale_given) {
  if (!avg_start_given)
    config.averaging_start_epoch = kind == ModelKind::multilevel ? 1000 : 500;
  // Study default: damp the covariance-block steps of multilevel minibatch runs.
  if (!rescale_given && kind == ModelKind::multilevel && config.batch_size > 0)
    config.block_rescale["chol"] = 0.05;
}

int finish_manifest(RunManifest& manifest, const std::string& out_dir, const std::string& status,
                    const std::string& error = "") {
  manifest.finished = iso_timestamp();
  manifest.status = status;
  manifest.error = error;
  manifest.write(out_dir + "/manifest.json");
  return 0;
}

/// Runs a command body; failures still leave a finalized manifest behind.
template <typename Fn>
int with_manifest(RunManifest& manifest, const std::string& out_dir, Fn&& body) {
  try {
    return body();
  } catch (const std::exception& e) {
    finish_manifest(manifest, out_dir, "error", e.what());
    throw;
  }
}

// -------------------------------------------------------------------------

int cmd_simulate(const GlobalArgs& global, const std::string& setting_name,
                 const std::string& model_kind, Eigen::Index n, Eigen::Index j, Eigen::Index k,
                 const std::string& q_arg, double sigma_diag, double sigma_offdiag,
                 const std::vector<std::string>& argv) {
  SimSetting setting;
  if (!setting_name.empty()) {
    setting = SimSetting::preset(setting_name);
    if (n > 0) setting.n = n;
  } else {
    if (model_kind.empty()) throw ConfigError("simulate needs --setting or --model");
    setting.kind = model_kind == "m2pl" ? ModelKind::m2pl : ModelKind::multilevel;
    if (n <= 0 || j <= 0 || k <= 0) throw ConfigError("custom settings need --n, --j, --k");
    setting.n = n;
    setting.j = j;
    setting.k = k;
    if (sigma_diag > 0) setting.sigma_diag = sigma_diag;
    if (sigma_offdiag >= 0) setting.sigma_offdiag = sigma_offdiag;
    if (setting.kind == ModelKind::multilevel) setting.true_mu = std::nullopt;
  }
  setting.q_seed = global.seed;
  if (q_arg == "simple")
    setting.q_mode = QMode::simple;
  else if (!q_arg.empty() && q_arg != "design") {
    const Eigen::MatrixXd q = read_matrix_csv(q_arg);
    setting.custom_q = q.cast<int>();
  }
  if (setting.kind == ModelKind::multilevel && !setting.true_mu) {
    // Custom multilevel shapes draw the fixed effects from Uniform(0.1, 1.1).
    RngStream rng(global.seed, StreamDomain::simulate, 0xFE);
    Eigen::VectorXd mu(setting.k);
    for (Eigen::Index f = 0; f < setting.k; ++f) mu(f) = 0.1 + rng.uniform();
    setting.true_mu = mu;
  }

  fs::create_directories(global.out);
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.argv = argv;
  manifest.seed = global.seed;
  manifest.started = iso_timestamp();
  manifest.config = {{"setting", setting_name.empty() ? "custom" : setting_name},
                     {"n", setting.n},
                     {"j", setting.j},
                     {"k", setting.k},
                     {"kind", model_kind_name(setting.kind)}};
  manifest.write(global.out + "/manifest.json");
  return with_manifest(manifest, global.out, [&]() -> int {

    const SimulatedData sim = simulate_dataset(setting, global.seed);
    if (setting.kind == ModelKind::multilevel) {
      write_multilevel_csv(sim.dataset.multilevel(), global.out + "/dataset.csv");
    } else {
      write_m2pl_csv(sim.dataset.m2pl(), global.out + "/dataset.csv", global.out + "/qmatrix.csv");
    }
    write_params_json(global.out + "/true_params.json", sim.true_beta, setting.kind);
    write_matrix_csv(sim.true_xi, global.out + "/true_latents.csv", "xi_");
    std::cout << "simulated " << model_kind_name(setting.kind) << " dataset: N=" << setting.n
              << " J=" << setting.j << " K=" << setting.k << " -> " << global.out << "\n";
    return finish_manifest(manifest, global.out, "ok");
  });
}

// -------------------------------------------------------------------------

int cmd_tune(const GlobalArgs& global, const DataArgs& data_args, const InitArgs& init_args,
             const std::string& algo, Eigen::Index batch, const std::vector<double>& candidates,
             Eigen::Index tune_epochs, Eigen::Index tail_epochs, double gamma_exponent,
             const std::map<std::string, double>& rescale, const std::vector<std::string>& argv) {
  OptimizerConfig config;
  config.batch_size = batch;
  apply_algorithm_name(config, algo);
  config.gamma_exponent = gamma_exponent;
  config.seed = global.seed;
  config.workers = global.workers;
  config.block_rescale = rescale;
  apply_model_defaults(config, infer_kind(data_args), false, !rescale.empty());

  TuneSpec spec;
  spec.candidates =
      candidates.empty() ? TuneSpec::default_candidates(config.sampler.kind) : candidates;
  spec.tune_epochs = tune_epochs;
  spec.tail_epochs = tail_epochs;

  fs::create_directories(global.out);
  RunManifest manifest;
  manifest.command = "tune";
  manifest.argv = argv;
  manifest.seed = global.seed;
  manifest.started = iso_timestamp();
  manifest.config = config_to_json(config, algo);
  manifest.config["candidates"] = spec.candidates;
  manifest.config["tune_epochs"] = spec.tune_epochs;
  manifest.config["tail_epochs"] = spec.tail_epochs;
  collect_input_digests(manifest, {data_args.data_path, data_args.q_path, init_args.true_params,
                                   init_args.true_latents});
  manifest.write(global.out + "/manifest.json");
  return with_manifest(manifest, global.out, [&]() -> int {
    const Dataset dataset = load_dataset(data_args);
    const auto model = make_model(dataset);
    const InitialValues init = resolve_init(dataset, *model, init_args, global.seed);
    const TuneReport report = tune(*model, init.beta, init.xi, config, spec);

    std::cout << "candidate  avg_ncll\n";
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& c : report.candidates) {
      if (c.diverged)
        std::cout << c.value << "  (diverged)\n";
      else
        std::cout << c.value << "  " << c.avg_ncll << "\n";
      rows.push_back({{"value", c.value}, {"avg_ncll", c.avg_ncll}, {"diverged", c.diverged}});
    }
    std::cout << "chosen: " << report.chosen << "\n";
    write_text_file(global.out + "/tune.json",
                    nlohmann::json{{"chosen", report.chosen}, {"candidates", rows}}.dump(2) + "\n");
    return finish_manifest(manifest, global.out, "ok");
  });
}

// -------------------------------------------------------------------------

int cmd_fit(const GlobalArgs& global, const DataArgs& data_args, const InitArgs& init_args,
            const std::string& algo, OptimizerConfig config, bool avg_start_given,
            bool rescale_given, bool want_info, Eigen::Index logml_draws, bool logml_per_obs,
            double inflation, const std::vector<std::string>& argv) {
  apply_algorithm_name(config, algo);
  config.seed = global.seed;
  config.workers = global.workers;
  config.compute_info = want_info;
  config.retain_latents = logml_draws > 0;
  apply_model_defaults(config, infer_kind(data_args), avg_start_given, rescale_given);

  fs::create_directories(global.out);
  RunManifest manifest;
  manifest.command = "fit";
  manifest.argv = argv;
  manifest.seed = global.seed;
  manifest.started = iso_timestamp();
  manifest.config = config_to_json(config, algo);
  collect_input_digests(manifest, {data_args.data_path, data_args.q_path, init_args.true_params,
                                   init_args.true_latents, init_args.init,
                                   init_args.init_latents});
  manifest.write(global.out + "/manifest.json");
  return with_manifest(manifest, global.out, [&]() -> int {
    const Dataset dataset = load_dataset(data_args);
    const auto model = make_model(dataset);
    const InitialValues init = resolve_init(dataset, *model, init_args, global.seed);
    const FitResult fit = run(*model, init.beta, init.xi, config);

    write_text_file(global.out + "/fit.json",
                    fit_to_json(fit, config, algo, model->kind()).dump(2) + "\n");
    write_checkpoints_csv(global.out + "/checkpoints.csv", fit, *model->layout());

    if (want_info && fit.observed_information)
      write_matrix_csv(*fit.observed_information, global.out + "/info.csv", "q_");

    if (logml_draws > 0 && !fit.diverged()) {
      const ImportanceDensity density = fit_importance_density(fit.retained_latents, inflation);
      const ParamCache cache = model->make_cache(fit.beta_pr);
      const LogMarginalEstimate logml =
          is_log_marginal(*model, cache, density, logml_draws, global.seed ^ 0x15C0DEULL,
                          global.workers);
      nlohmann::json j;
      j["total"] = logml.total;
      j["draws"] = logml_draws;
      j["inflation"] = inflation;
      j["min_effective_sample_size"] = logml.min_ess;
      j["max_weight_fraction"] = logml.max_weight_fraction;
      if (logml_per_obs) {
        std::vector<double> per(logml.per_obs.data(), logml.per_obs.data() + logml.per_obs.size());
        j["per_obs"] = per;
        std::vector<double> ess(logml.effective_sample_size.data(),
                                logml.effective_sample_size.data() +
                                    logml.effective_sample_size.size());
        j["effective_sample_size"] = ess;
      }
      write_text_file(global.out + "/logml.json", j.dump(2) + "\n");
      std::cout << "log marginal likelihood (IS, T=" << logml_draws << "): " << logml.total
                << "\n";
    }

    std::cout << "fit: " << fit.stop_reason << " after " << fit.epochs_run << " epochs, "
              << "mean acceptance " << fit.mean_accept_rate << ", elapsed "
              << fit.elapsed_seconds << "s\n";
    if (fit.diverged()) {
      finish_manifest(manifest, global.out, "diverged", fit.diagnostic);
      std::cerr << "run diverged: " << fit.diagnostic << "\n";
      return 3;
    }
    return finish_manifest(manifest, global.out, "ok");
  });
}

// -------------------------------------------------------------------------

int cmd_replicate(const GlobalArgs& global, const std::string& setting_name, Eigen::Index n,
                  const std::string& algos_path, Eigen::Index r_reps,
                  const std::vector<std::string>& argv) {
  SimSetting setting = SimSetting::preset(setting_name);
  if (n > 0) setting.n = n;
  setting.q_seed = global.seed;

  std::ifstream in(algos_path);
  if (!in) throw IoError("cannot open " + algos_path);
  nlohmann::json spec_json;
  in >> spec_json;
  if (!spec_json.contains("algorithms") || spec_json.at("algorithms").empty())
    throw ConfigError("algorithm file needs a nonempty 'algorithms' array");

  OptimizerConfig shared;
  config_from_json(spec_json, shared);  // shared keys: max_epochs, stride, ...

  std::vector<AlgorithmSpec> algorithms;
  std::vector<nlohmann::json> echo;
  for (const auto& entry : spec_json.at("algorithms")) {
    AlgorithmSpec algo;
    OptimizerConfig config = shared;
    if (entry.contains("h")) config.sampler.h = entry.at("h").get<double>();
    if (entry.contains("sigma2")) config.sampler.sigma2 = entry.at("sigma2").get<double>();
    if (entry.contains("batch_size"))
      config.batch_size = entry.at("batch_size").get<Eigen::Index>();
    if (entry.contains("block_rescale"))
      config.block_rescale = entry.at("block_rescale").get<std::map<std::string, double>>();
    if (!entry.contains("name")) throw ConfigError("every algorithm entry needs a 'name'");
    algo.name = entry.at("name").get<std::string>();
    apply_algorithm_name(config, algo.name);
    apply_model_defaults(config, setting.kind, true, entry.contains("block_rescale"));
    algo.config = config;
    algorithms.push_back(algo);
  }
  // Optional tuning phase: tune the listed algorithms on the first
  // replication's dataset and reuse values where 'step_from' points.
  std::map<std::string, double> tuned;
  if (spec_json.contains("tune")) {
    const auto& tj = spec_json.at("tune");
    TuneSpec spec;
    spec.tune_epochs = tj.value("tune_epochs", Eigen::Index{1000});
    spec.tail_epochs = tj.value("tail_epochs", Eigen::Index{50});
    const SimulatedData sim =
        simulate_dataset(setting, harness_detail::derive_seed(global.seed, 1, 0));
    const auto model = make_model(sim.dataset);
    const InitialValues init = initial_values_simulation(
        sim.dataset, sim.true_beta, sim.true_xi,
        harness_detail::derive_seed(global.seed, 1, 0) ^ 0x5EEDULL);
    for (const auto& name : tj.at("algorithms").get<std::vector<std::string>>()) {
      auto it = std::find_if(algorithms.begin(), algorithms.end(),
                             [&](const AlgorithmSpec& a) { return a.name == name; });
      if (it == algorithms.end()) throw ConfigError("tune lists unknown algorithm " + name);
      spec.candidates = tj.contains("candidates")
                            ? tj.at("candidates").get<std::vector<double>>()
                            : TuneSpec::default_candidates(it->config.sampler.kind);
      OptimizerConfig tune_config = it->config;
      tune_config.seed = global.seed;
      tune_config.workers = global.workers;
      const TuneReport report = tune(*model, init.beta, init.xi, tune_config, spec);
      tuned[name] = report.chosen;
      if (it->config.sampler.kind == SamplerKind::mala)
        it->config.sampler.h = report.chosen;
      else
        it->config.sampler.sigma2 = report.chosen;
      std::cout << "tuned " << name << ": " << report.chosen << "\n";
    }
  }
  for (std::size_t a = 0; a < algorithms.size(); ++a) {
    const auto& entry = spec_json.at("algorithms")[a];
    if (!entry.contains("step_from")) continue;
    const std::string source = entry.at("step_from").get<std::string>();
    const auto it = std::find_if(algorithms.begin(), algorithms.end(),
                                 [&](const AlgorithmSpec& s) { return s.name == source; });
    if (it == algorithms.end()) throw ConfigError("step_from names unknown algorithm " + source);
    if (it->config.sampler.kind != algorithms[a].config.sampler.kind)
      throw ConfigError("step_from must reference an algorithm with the same sampler");
    if (algorithms[a].config.sampler.kind == SamplerKind::mala)
      algorithms[a].config.sampler.h = it->config.sampler.h;
    else
      algorithms[a].config.sampler.sigma2 = it->config.sampler.sigma2;
  }
  for (const auto& algo : algorithms) echo.push_back(config_to_json(algo.config, algo.name));

  fs::create_directories(global.out);
  RunManifest manifest;
  manifest.command = "replicate";
  manifest.argv = argv;
  manifest.seed = global.seed;
  manifest.started = iso_timestamp();
  manifest.config = {{"setting", setting_name},
                     {"n", setting.n},
                     {"replications", r_reps},
                     {"algorithms", echo}};
  collect_input_digests(manifest, {algos_path});
  manifest.write(global.out + "/manifest.json");
  return with_manifest(manifest, global.out, [&]() -> int {

    const TrajectoryReport report =
        replicate(setting, algorithms, r_reps, global.seed, global.workers);
    write_report_csvs(global.out, report);
    manifest.config["report"] = report_manifest_json(report);
    if (!tuned.empty()) manifest.config["tuned_steps"] = tuned;

    std::cout << "replications completed: " << report.replications << ", failures: "
              << report.failures << "\n";
    for (const auto& block : report.blocks) {
      const auto& m = report.mae.at(block);
      std::cout << "final MAE (" << block << "):";
      for (Eigen::Index a = 0; a < m.rows(); ++a)
        std::cout << " " << report.algorithms[static_cast<std::size_t>(a)] << "="
                  << m(a, m.cols() - 1);
      std::cout << "\n";
    }
    if (report.replications == 0) {
      finish_manifest(manifest, global.out, "failed", "all replications failed");
      return 3;
    }
    return finish_manifest(manifest, global.out, "ok");
  });
}

// -------------------------------------------------------------------------

int cmd_evaluate(const GlobalArgs& global, const DataArgs& data_args,
                 const std::string& checkpoints_path, const std::string& true_params_path,
                 const std::vector<std::string>& argv) {
  fs::create_directories(global.out);
  RunManifest manifest;
  manifest.command = "evaluate";
  manifest.argv = argv;
  manifest.seed = global.seed;
  manifest.started = iso_timestamp();
  collect_input_digests(manifest,
                        {data_args.data_path, data_args.q_path, checkpoints_path,
                         true_params_path});
  manifest.write(global.out + "/manifest.json");
  return with_manifest(manifest, global.out, [&]() -> int {
    const Dataset dataset = load_dataset(data_args);
    const auto model = make_model(dataset);
    const ParamVector truth = read_params_json(true_params_path, *model);
    const CheckpointTable table = read_checkpoints_csv(checkpoints_path, model->layout()->dim());
    const auto blocks = ae_blocks(model->kind(), model->latent_dim());
    std::ofstream out(global.out + "/evaluate.csv");
    if (!out) throw IoError("cannot write evaluate.csv");
    out << "epoch,seconds";
    for (const auto& b : blocks) out << ",ae_" << b;
    out << ",ae_avg\n";
    for (std::size_t row = 0; row < table.epochs.size(); ++row) {
      const ParamVector hat(table.betas[row], model->layout());
      out << table.epochs[row] << "," << csv_detail::format_double(table.seconds[row]);
      double total = 0.0;
      for (const auto& b : blocks) {
        const double v = ae(hat, truth, b, model->kind(), model->latent_dim());
        out << "," << csv_detail::format_double(v);
        total += v;
      }
      out << "," << csv_detail::format_double(total / static_cast<double>(blocks.size())) << "\n";
    }
    std::cout << "wrote " << global.out << "/evaluate.csv (" << table.epochs.size() << " rows)\n";
    return finish_manifest(manifest, global.out, "ok");
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic optimisation for marginal maximum likelihood estimation of "
               "high-dimensional latent variable models"};
  app.require_subcommand(1);
  // `--h` is the MALA step flag, so help answers to --help only.
  app.set_help_flag("--help", "Print help");

  GlobalArgs global;
  app.add_option("--seed", global.seed, "Master RNG seed")->capture_default_str();
  app.add_option("--workers", global.workers, "Worker thread count")->capture_default_str();
  app.add_option("--out", global.out, "Output directory")->capture_default_str();
  app.fallthrough();

  // simulate ---------------------------------------------------------------
  auto* sim = app.add_subcommand("simulate", "Generate a study dataset with known truth");
  std::string setting_name, sim_model, sim_q;
  Eigen::Index sim_n = 0, sim_j = 0, sim_k = 0;
  double sim_sigma_diag = 0.0, sim_sigma_offdiag = -1.0;
  sim->add_option("--setting", setting_name,
                  "Preset: multilevel-k5 | multilevel-k10 | m2pl-k5 | m2pl-k10");
  sim->add_option("--model", sim_model, "Custom setting model: multilevel | m2pl");
  sim->add_option("--n", sim_n, "Observations (overrides the preset)");
  sim->add_option("--j", sim_j, "Items / level-1 units");
  sim->add_option("--k", sim_k, "Latent dimension");
  sim->add_option("--q", sim_q, "Q matrix: design | simple | path to CSV");
  sim->add_option("--sigma-diag", sim_sigma_diag, "True Sigma diagonal");
  sim->add_option("--sigma-offdiag", sim_sigma_offdiag, "True Sigma off-diagonal");

  // shared data/init flags ---------------------------------------------------
  DataArgs data_args;
  InitArgs init_args;
  auto add_data_flags = [&](CLI::App* cmd) {
    cmd->add_option("--data", data_args.data_path, "Dataset CSV");
    cmd->add_option("--q", data_args.q_path, "Q-matrix CSV (selects the M2PL model)");
    cmd->add_option("--model", data_args.model_kind, "multilevel | m2pl");
  };
  auto add_init_flags = [&](CLI::App* cmd) {
    cmd->add_option("--init", init_args.init,
                    "simulation | sumscore | path to a parameter JSON");
    cmd->add_option("--init-latents", init_args.init_latents, "Initial latent CSV");
    cmd->add_option("--true-params", init_args.true_params, "True parameter JSON");
    cmd->add_option("--true-latents", init_args.true_latents, "True latent CSV");
  };

  // tune ---------------------------------------------------------------------
  auto* tune_cmd = app.add_subcommand("tune", "Pick a sampler step from candidate values");
  std::string tune_algo = "d-somala";
  Eigen::Index tune_batch = 0, tune_epochs = 1000, tail_epochs = 50;
  std::vector<double> tune_candidates;
  double tune_gamma_exponent = 0.51;
  std::map<std::string, double> tune_rescale;
  add_data_flags(tune_cmd);
  add_init_flags(tune_cmd);
  tune_cmd->add_option("--algo", tune_algo, "Algorithm name (see fit)")->capture_default_str();
  tune_cmd->add_option("--n", tune_batch, "Minibatch size");
  tune_cmd->add_option("--candidates", tune_candidates,
                       "Step candidates (default: study grids)");
  tune_cmd->add_option("--tune-epochs", tune_epochs, "Epochs per candidate")
      ->capture_default_str();
  tune_cmd->add_option("--tail-epochs", tail_epochs, "Averaging tail")->capture_default_str();
  tune_cmd->add_option("--gamma-exponent", tune_gamma_exponent, "Step decay exponent")
      ->capture_default_str();
  tune_cmd->add_option("--rescale", tune_rescale, "Per-block step rescale (block=factor)");

  // fit ------------------------------------------------------------------------
  auto* fit_cmd = app.add_subcommand("fit", "Run one stochastic-optimisation fit");
  fit_cmd->set_help_flag("--help", "Print help");
  std::string fit_algo = "d-somala";
  std::string fit_config_path;
  OptimizerConfig fit_config;
  bool fit_info = false, fit_logml_per_obs = false;
  Eigen::Index fit_logml = 0;
  double fit_inflation = 2.0;
  Eigen::Index stop_window = 0;
  double stop_threshold = 0.05;
  int stop_consecutive = 10;
  add_data_flags(fit_cmd);
  add_init_flags(fit_cmd);
  fit_cmd->add_option("--config", fit_config_path, "Config JSON (flags override it)");
  auto* algo_opt = fit_cmd->add_option("--algo", fit_algo,
                                       "somala | somh | d-somala | d-somh | qn-somala | "
                                       "qn-somh | qn-d-somala | qn-d-somh");
  auto* n_opt = fit_cmd->add_option("--n", fit_config.batch_size, "Minibatch size");
  auto* h_opt = fit_cmd->add_option("--h", fit_config.sampler.h, "MALA step size");
  auto* s2_opt = fit_cmd->add_option("--sigma2", fit_config.sampler.sigma2,
                                     "Random-walk noise variance");
  auto* epochs_opt =
      fit_cmd->add_option("--max-epochs", fit_config.max_epochs, "Epoch budget");
  auto* avg_opt = fit_cmd->add_option("--avg-start", fit_config.averaging_start_epoch,
                                      "Polyak-Ruppert start epoch (default 1000/500)");
  auto* stride_opt =
      fit_cmd->add_option("--stride", fit_config.checkpoint_stride, "Checkpoint stride");
  auto* gamma_opt = fit_cmd->add_option("--gamma-exponent", fit_config.gamma_exponent,
                                        "Step decay exponent");
  std::map<std::string, double> fit_rescale;
  auto* rescale_opt =
      fit_cmd->add_option("--rescale", fit_rescale, "Per-block step rescale (block=factor)");
  auto* stop_opt = fit_cmd->add_option("--stop-window", stop_window,
                                       "Enable the windowed stop rule with this window");
  fit_cmd->add_option("--stop-threshold", stop_threshold, "Stop threshold")
      ->capture_default_str();
  fit_cmd->add_option("--stop-consecutive", stop_consecutive, "Consecutive windows")
      ->capture_default_str();
  fit_cmd->add_flag("--info", fit_info, "Accumulate the observed information matrix");
  fit_cmd->add_option("--logml", fit_logml,
                      "Importance-sampling draws for the marginal log-likelihood");
  fit_cmd->add_flag("--logml-per-obs", fit_logml_per_obs, "Include per-observation values");
  fit_cmd->add_option("--inflation", fit_inflation, "Importance density tail inflation")
      ->capture_default_str();
  auto* partition_opt = fit_cmd->add_flag("--partition-epochs", fit_config.partition_epochs,
                                          "Shuffled-partition minibatches per epoch");

  // replicate -------------------------------------------------------------------
  auto* rep_cmd = app.add_subcommand("replicate", "Multi-replication study with MAE tables");
  std::string rep_setting, rep_algos;
  Eigen::Index rep_n = 0, rep_r = 10;
  rep_cmd->add_option("--setting", rep_setting, "Preset setting name")->required();
  rep_cmd->add_option("--n", rep_n, "Observations per dataset (overrides the preset)");
  rep_cmd->add_option("--algos", rep_algos, "Algorithm list JSON")->required();
  rep_cmd->add_option("--r", rep_r, "Replications")->capture_default_str();

  // evaluate -----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("evaluate", "AE trajectories for a saved fit");
  std::string eval_checkpoints, eval_truth;
  add_data_flags(eval_cmd);
  eval_cmd->add_option("--checkpoints", eval_checkpoints, "checkpoints.csv from fit")
      ->required();
  eval_cmd->add_option("--true-params", eval_truth, "True parameter JSON")->required();

  std::vector<std::string> argv_copy(argv, argv + argc);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sim)
      return cmd_simulate(global, setting_name, sim_model, sim_n, sim_j, sim_k, sim_q,
                          sim_sigma_diag, sim_sigma_offdiag, argv_copy);
    if (*tune_cmd)
      return cmd_tune(global, data_args, init_args, tune_algo, tune_batch, tune_candidates,
                      tune_epochs, tail_epochs, tune_gamma_exponent, tune_rescale, argv_copy);
    if (*fit_cmd) {
      if (!fit_config_path.empty()) {
        std::ifstream in(fit_config_path);
        if (!in) throw IoError("cannot open " + fit_config_path);
        nlohmann::json j;
        in >> j;
        OptimizerConfig from_file;
        const std::string file_algo = config_from_json(j, from_file);
        // Flags given on the command line win over file values.
        if (!*algo_opt && !file_algo.empty()) fit_algo = file_algo;
        if (!*n_opt) fit_config.batch_size = from_file.batch_size;
        if (!*h_opt) fit_config.sampler.h = from_file.sampler.h;
        if (!*s2_opt) fit_config.sampler.sigma2 = from_file.sampler.sigma2;
        if (!*epochs_opt) fit_config.max_epochs = from_file.max_epochs;
        if (!*avg_opt) fit_config.averaging_start_epoch = from_file.averaging_start_epoch;
        if (!*stride_opt) fit_config.checkpoint_stride = from_file.checkpoint_stride;
        if (!*gamma_opt) fit_config.gamma_exponent = from_file.gamma_exponent;
        if (!*rescale_opt) fit_rescale = from_file.block_rescale;
        if (!*partition_opt) fit_config.partition_epochs = from_file.partition_epochs;
        if (!*stop_opt && from_file.stop) {
          stop_window = from_file.stop->window;
          stop_threshold = from_file.stop->threshold;
          stop_consecutive = from_file.stop->consecutive;
        }
        fit_config.fixed_gamma = from_file.fixed_gamma;
        fit_config.sampler.inner_steps = from_file.sampler.inner_steps;
      }
      fit_config.block_rescale = fit_rescale;
      if (stop_window > 0) {
        StopRule rule;
        rule.window = stop_window;
        rule.threshold = stop_threshold;
        rule.consecutive = stop_consecutive;
        fit_config.stop = rule;
      }
      return cmd_fit(global, data_args, init_args, fit_algo, fit_config,
                     static_cast<bool>(*avg_opt) || !fit_config_path.empty(),
                     static_cast<bool>(*rescale_opt) || !fit_config_path.empty(), fit_info,
                     fit_logml, fit_logml_per_obs, fit_inflation, argv_copy);
    }
    if (*rep_cmd)
      return cmd_replicate(global, rep_setting, rep_n, rep_algos, rep_r, argv_copy);
    if (*eval_cmd)
      return cmd_evaluate(global, data_args, eval_checkpoints, eval_truth, argv_copy);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
