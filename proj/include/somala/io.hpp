#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "somala/dataset.hpp"
#include "somala/errors.hpp"
#include "somala/harness.hpp"
#include "somala/model.hpp"
#include "somala/optimizer.hpp"
#include "somala/param_vector.hpp"

namespace somala {

inline constexpr const char* kLibraryVersion = "0.1.0";

// ---------------------------------------------------------------------------
// Small utilities.

/// FNV-1a 64-bit digest of a file, hex-encoded; used for manifest provenance.
inline std::string file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for digest");
  std::uint64_t hash = 0xCBF29CE484222325ULL;
  char buffer[8192];
  while (in.read(buffer, sizeof(buffer)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      hash ^= static_cast<unsigned char>(buffer[i]);
      hash *= 0x100000001B3ULL;
    }
    if (!in) break;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(hash));
  return out;
}

inline std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
}

// ---------------------------------------------------------------------------
// Parameter vectors as JSON with named blocks.

inline nlohmann::json params_to_json(const ParamVector& beta, ModelKind kind) {
  nlohmann::json blocks;
  for (const auto& b : beta.layout->blocks()) {
    std::vector<double> values(static_cast<std::size_t>(b.size));
    for (Eigen::Index q = 0; q < b.size; ++q)
      values[static_cast<std::size_t>(q)] = beta.values(b.offset + q);
    blocks[b.name] = values;
  }
  return nlohmann::json{{"model", model_kind_name(kind)}, {"blocks", blocks}};
}

inline ParamVector params_from_json(const nlohmann::json& j, const LatentModel& model) {
  if (!j.contains("blocks")) throw IoError("parameter JSON lacks a 'blocks' object");
  if (j.contains("model") &&
      j.at("model").get<std::string>() != model_kind_name(model.kind()))
    throw IoError("parameter JSON is for a different model kind");
  ParamVector beta = ParamVector::zeros(model.layout());
  for (const auto& b : model.layout()->blocks()) {
    if (!j.at("blocks").contains(b.name))
      throw IoError("parameter JSON lacks block '" + b.name + "'");
    const auto values = j.at("blocks").at(b.name).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(values.size()) != b.size)
      throw IoError("block '" + b.name + "' has length " + std::to_string(values.size()) +
                    ", expected " + std::to_string(b.size));
    for (Eigen::Index q = 0; q < b.size; ++q)
      beta.values(b.offset + q) = values[static_cast<std::size_t>(q)];
  }
  return beta;
}

inline void write_params_json(const std::string& path, const ParamVector& beta,
                              ModelKind kind) {
  write_text_file(path, params_to_json(beta, kind).dump(2) + "\n");
}

inline ParamVector read_params_json(const std::string& path, const LatentModel& model) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  in >> j;
  return params_from_json(j, model);
}

// ---------------------------------------------------------------------------
// Optimizer configuration as JSON (flat keys shared with the CLI flags).

inline const std::map<std::string, std::string>& algorithm_table() {
  // name -> sampler kind, minibatch flag, qn flag, encoded as "kind,mini,qn"
  static const std::map<std::string, std::string> table = {
      {"somala", "mala,full,plain"},    {"somh", "rwmh,full,plain"},
      {"d-somala", "mala,mini,plain"},  {"d-somh", "rwmh,mini,plain"},
      {"qn-somala", "mala,full,qn"},    {"qn-somh", "rwmh,full,qn"},
      {"qn-d-somala", "mala,mini,qn"},  {"qn-d-somh", "rwmh,mini,qn"},
  };
  return table;
}

/// Applies an algorithm name (Table-style: d-somala, qn-somh, ...) to a
/// config: sampler kind, QN flag, and fullbatch batch size when called for.
inline void apply_algorithm_name(OptimizerConfig& config, const std::string& name) {
  const auto it = algorithm_table().find(name);
  if (it == algorithm_table().end()) {
    std::string known;
    for (const auto& [k, v] : algorithm_table()) known += k + " ";
    throw ConfigError("unknown algorithm '" + name + "'; known: " + known);
  }
  const std::string& code = it->second;
  config.sampler.kind = code.substr(0, 4) == "mala" ? SamplerKind::mala : SamplerKind::rwmh;
  const bool minibatch = code.find("mini") != std::string::npos;
  config.qn = code.find(",qn") != std::string::npos;
  if (!minibatch)
    config.batch_size = 0;  // fullbatch
  else if (config.batch_size == 0)
    throw ConfigError("algorithm '" + name + "' needs a minibatch size (--n)");
}

inline nlohmann::json config_to_json(const OptimizerConfig& c, const std::string& algo_name) {
  nlohmann::json j;
  j["algo"] = algo_name;
  j["sampler"] = {{"kind", c.sampler.kind == SamplerKind::mala ? "mala" : "rwmh"},
                  {"h", c.sampler.h},
                  {"sigma2", c.sampler.sigma2},
                  {"inner_steps", c.sampler.inner_steps}};
  j["batch_size"] = c.batch_size;
  j["qn"] = c.qn;
  j["gamma_exponent"] = c.gamma_exponent;
  if (c.fixed_gamma) j["fixed_gamma"] = *c.fixed_gamma;
  j["block_rescale"] = c.block_rescale;
  j["averaging_start_epoch"] = c.averaging_start_epoch;
  j["max_epochs"] = c.max_epochs;
  j["seed"] = c.seed;
  j["workers"] = c.workers;
  j["checkpoint_stride"] = c.checkpoint_stride;
  j["partition_epochs"] = c.partition_epochs;
  j["compute_info"] = c.compute_info;
  j["retain_latents"] = c.retain_latents;
  if (c.stop)
    j["stop"] = {{"window", c.stop->window},
                 {"threshold", c.stop->threshold},
                 {"consecutive", c.stop->consecutive}};
  else
    j["stop"] = nullptr;
  return j;
}

/// Reads config keys present in `j` into `c`; absent keys keep their values.
inline std::string config_from_json(const nlohmann::json& j, OptimizerConfig& c) {
  std::string algo_name;
  if (j.contains("sampler")) {
    const auto& s = j.at("sampler");
    if (s.contains("kind"))
      c.sampler.kind =
          s.at("kind").get<std::string>() == "mala" ? SamplerKind::mala : SamplerKind::rwmh;
    if (s.contains("h")) c.sampler.h = s.at("h").get<double>();
    if (s.contains("sigma2")) c.sampler.sigma2 = s.at("sigma2").get<double>();
    if (s.contains("inner_steps")) c.sampler.inner_steps = s.at("inner_steps").get<int>();
  }
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<Eigen::Index>();
  if (j.contains("qn")) c.qn = j.at("qn").get<bool>();
  if (j.contains("gamma_exponent")) c.gamma_exponent = j.at("gamma_exponent").get<double>();
  if (j.contains("fixed_gamma") && !j.at("fixed_gamma").is_null())
    c.fixed_gamma = j.at("fixed_gamma").get<double>();
  if (j.contains("block_rescale"))
    c.block_rescale = j.at("block_rescale").get<std::map<std::string, double>>();
  if (j.contains("averaging_start_epoch"))
    c.averaging_start_epoch = j.at("averaging_start_epoch").get<Eigen::Index>();
  if (j.contains("max_epochs")) c.max_epochs = j.at("max_epochs").get<Eigen::Index>();
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("workers")) c.workers = j.at("workers").get<int>();
  if (j.contains("checkpoint_stride"))
    c.checkpoint_stride = j.at("checkpoint_stride").get<Eigen::Index>();
  if (j.contains("partition_epochs")) c.partition_epochs = j.at("partition_epochs").get<bool>();
  if (j.contains("compute_info")) c.compute_info = j.at("compute_info").get<bool>();
  if (j.contains("retain_latents")) c.retain_latents = j.at("retain_latents").get<bool>();
  if (j.contains("stop") && !j.at("stop").is_null()) {
    StopRule rule;
    const auto& s = j.at("stop");
    if (s.contains("window")) rule.window = s.at("window").get<Eigen::Index>();
    if (s.contains("threshold")) rule.threshold = s.at("threshold").get<double>();
    if (s.contains("consecutive")) rule.consecutive = s.at("consecutive").get<int>();
    c.stop = rule;
  }
  if (j.contains("algo")) {
    algo_name = j.at("algo").get<std::string>();
    apply_algorithm_name(c, algo_name);
  }
  return algo_name;
}

// ---------------------------------------------------------------------------
// Fit artifacts.

/// Checkpoint CSV: epoch, seconds, flattened beta (block_index names), accept rate.
inline void write_checkpoints_csv(const std::string& path, const FitResult& fit,
                                  const BlockLayout& layout) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "epoch,seconds";
  for (const auto& b : layout.blocks())
    for (Eigen::Index q = 0; q < b.size; ++q) out << "," << b.name << "_" << q;
  out << ",accept_rate\n";
  for (const auto& cp : fit.checkpoints) {
    out << cp.epoch << "," << csv_detail::format_double(cp.seconds);
    for (Eigen::Index q = 0; q < cp.beta.size(); ++q)
      out << "," << csv_detail::format_double(cp.beta(q));
    out << "," << csv_detail::format_double(cp.accept_rate) << "\n";
  }
}

struct CheckpointTable {
  std::vector<Eigen::Index> epochs;
  std::vector<double> seconds;
  std::vector<Eigen::VectorXd> betas;
  std::vector<double> accept_rates;
};

inline CheckpointTable read_checkpoints_csv(const std::string& path, Eigen::Index p) {
  std::vector<std::string> header;
  const auto rows = csv_detail::read_numeric_csv(path, &header);
  if (static_cast<Eigen::Index>(header.size()) != p + 3)
    throw IoError("checkpoint CSV has " + std::to_string(header.size()) +
                  " columns, expected " + std::to_string(p + 3));
  CheckpointTable table;
  for (const auto& row : rows) {
    table.epochs.push_back(static_cast<Eigen::Index>(row[0]));
    table.seconds.push_back(row[1]);
    Eigen::VectorXd beta(p);
    for (Eigen::Index q = 0; q < p; ++q) beta(q) = row[static_cast<std::size_t>(q) + 2];
    table.betas.push_back(std::move(beta));
    table.accept_rates.push_back(row.back());
  }
  return table;
}

inline nlohmann::json fit_to_json(const FitResult& fit, const OptimizerConfig& config,
                                  const std::string& algo_name, ModelKind kind) {
  nlohmann::json j;
  j["config"] = config_to_json(config, algo_name);
  j["stop_reason"] = fit.stop_reason;
  if (!fit.diagnostic.empty()) j["diagnostic"] = fit.diagnostic;
  j["epochs_run"] = fit.epochs_run;
  j["elapsed_seconds"] = fit.elapsed_seconds;
  j["mean_accept_rate"] = fit.mean_accept_rate;
  j["constraints"] = {{"max_row_norm_error", fit.max_row_norm_error},
                      {"max_diag_error", fit.max_diag_error}};
  j["diff_max_trace"] = fit.diff_max_trace;
  j["beta_final"] = params_to_json(fit.beta_final, kind);
  j["beta_pr"] = params_to_json(fit.beta_pr, kind);
  return j;
}

// ---------------------------------------------------------------------------
// Replication report files.

inline void write_report_csvs(const std::string& out_dir, const TrajectoryReport& report) {
  for (const auto& block : report.blocks) {
    std::ofstream out(out_dir + "/mae_" + block + ".csv");
    if (!out) throw IoError("cannot write report CSV in " + out_dir);
    out << "algorithm";
    for (const auto e : report.epochs) out << ",epoch_" << e;
    out << "\n";
    const auto& m = report.mae.at(block);
    for (Eigen::Index a = 0; a < m.rows(); ++a) {
      out << report.algorithms[static_cast<std::size_t>(a)];
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        out << "," << csv_detail::format_double(m(a, c));
      out << "\n";
    }
  }
}

inline nlohmann::json report_manifest_json(const TrajectoryReport& report) {
  nlohmann::json j;
  j["algorithms"] = report.algorithms;
  j["blocks"] = report.blocks;
  j["epochs"] = report.epochs;
  j["replications_completed"] = report.replications;
  j["failures"] = report.failures;
  j["failure_notes"] = report.failure_notes;
  j["dataset_seeds"] = report.dataset_seeds;
  j["run_seeds"] = report.run_seeds;
  std::vector<std::vector<double>> seconds;
  for (Eigen::Index a = 0; a < report.mean_seconds.rows(); ++a) {
    std::vector<double> row;
    for (Eigen::Index c = 0; c < report.mean_seconds.cols(); ++c)
      row.push_back(report.mean_seconds(a, c));
    seconds.push_back(std::move(row));
  }
  j["mean_checkpoint_seconds"] = seconds;
  return j;
}

// ---------------------------------------------------------------------------
// Run manifests.

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;
  std::map<std::string, std::string> input_digests;
  std::uint64_t seed = 0;
  std::string started;
  std::string finished;
  std::string status = "running";
  std::string error;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config;
    j["inputs"] = input_digests;
    j["seed"] = seed;
    j["library_version"] = kLibraryVersion;
    j["started"] = started;
    if (!finished.empty()) j["finished"] = finished;
    j["status"] = status;
    if (!error.empty()) j["error"] = error;
    return j;
  }

  void write(const std::string& path) const { write_text_file(path, to_json().dump(2) + "\n"); }
};

}  // namespace somala
