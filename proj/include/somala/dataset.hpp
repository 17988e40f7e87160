#pragma once

#include <Eigen/Core>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "somala/errors.hpp"

namespace somala {

enum class ModelKind { multilevel, m2pl };

inline const char* model_kind_name(ModelKind kind) {
  return kind == ModelKind::multilevel ? "multilevel" : "m2pl";
}

/// Two-level binary-response data: per level-2 unit i, responses y_i (J_i)
/// and covariate rows X_i (J_i x K) whose first column is identically 1.
struct MultilevelData {
  std::vector<Eigen::MatrixXd> X;
  std::vector<Eigen::VectorXd> y;
  Eigen::Index K = 0;

  Eigen::Index n() const { return static_cast<Eigen::Index>(y.size()); }

  void validate() const {
    if (X.size() != y.size()) throw ConfigError("multilevel data: X/y length mismatch");
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (X[i].rows() != y[i].size() || X[i].cols() != K)
        throw ConfigError("multilevel data: covariate shape mismatch at unit " + std::to_string(i));
      for (Eigen::Index j = 0; j < y[i].size(); ++j) {
        if (y[i](j) != 0.0 && y[i](j) != 1.0)
          throw ConfigError("multilevel data: responses must be 0/1");
        if (X[i](j, 0) != 1.0)
          throw ConfigError("multilevel data: first covariate column must be 1 (random intercept)");
      }
    }
  }
};

/// Item-response data: N x J binary matrix Y with a J x K loading indicator Q.
struct M2plData {
  Eigen::MatrixXd Y;
  Eigen::MatrixXi Q;

  Eigen::Index n() const { return Y.rows(); }
  Eigen::Index n_items() const { return Y.cols(); }
  Eigen::Index K() const { return Q.cols(); }

  void validate() const {
    if (Y.cols() != Q.rows()) throw ConfigError("m2pl data: Y columns must match Q rows");
    for (Eigen::Index j = 0; j < Q.rows(); ++j) {
      int row_sum = 0;
      for (Eigen::Index k = 0; k < Q.cols(); ++k) {
        if (Q(j, k) != 0 && Q(j, k) != 1) throw ConfigError("m2pl data: Q entries must be 0/1");
        row_sum += Q(j, k);
      }
      if (row_sum == 0)
        throw ConfigError("m2pl data: item " + std::to_string(j) + " measures no factor");
    }
    for (Eigen::Index i = 0; i < Y.rows(); ++i)
      for (Eigen::Index j = 0; j < Y.cols(); ++j)
        if (Y(i, j) != 0.0 && Y(i, j) != 1.0)
          throw ConfigError("m2pl data: responses must be 0/1");
  }
};

struct Dataset {
  std::variant<MultilevelData, M2plData> data;

  ModelKind kind() const {
    return std::holds_alternative<MultilevelData>(data) ? ModelKind::multilevel : ModelKind::m2pl;
  }
  const MultilevelData& multilevel() const { return std::get<MultilevelData>(data); }
  const M2plData& m2pl() const { return std::get<M2plData>(data); }
  Eigen::Index n() const {
    return kind() == ModelKind::multilevel ? multilevel().n() : m2pl().n();
  }
  Eigen::Index latent_dim() const {
    return kind() == ModelKind::multilevel ? multilevel().K : m2pl().K();
  }
  void validate() const {
    if (kind() == ModelKind::multilevel)
      multilevel().validate();
    else
      m2pl().validate();
  }
};

// ---------------------------------------------------------------------------
// CSV formats.
//   m2pl responses: header item_1..item_J, N rows of 0/1.
//   Q-matrix:       header factor_1..factor_K, J rows of 0/1.
//   multilevel:     long format, header level2_id,y,x_1..x_K.

namespace csv_detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw IoError("invalid numeric field '" + s + "' in " + where);
  }
}

inline std::vector<std::vector<double>> read_numeric_csv(const std::string& path,
                                                         std::vector<std::string>* header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty file: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (header) *header = split_line(line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_line(line);
    std::vector<double> row;
    row.reserve(fields.size());
    for (const auto& f : fields) row.push_back(parse_double(f, path));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace csv_detail

inline M2plData read_m2pl_csv(const std::string& responses_path, const std::string& q_path) {
  const auto y_rows = csv_detail::read_numeric_csv(responses_path, nullptr);
  const auto q_rows = csv_detail::read_numeric_csv(q_path, nullptr);
  if (y_rows.empty()) throw IoError("no responses in " + responses_path);
  if (q_rows.empty()) throw IoError("no rows in " + q_path);
  M2plData d;
  const Eigen::Index J = static_cast<Eigen::Index>(y_rows.front().size());
  const Eigen::Index K = static_cast<Eigen::Index>(q_rows.front().size());
  d.Y.resize(static_cast<Eigen::Index>(y_rows.size()), J);
  for (Eigen::Index i = 0; i < d.Y.rows(); ++i) {
    if (static_cast<Eigen::Index>(y_rows[i].size()) != J)
      throw IoError("ragged response row in " + responses_path);
    for (Eigen::Index j = 0; j < J; ++j) d.Y(i, j) = y_rows[i][j];
  }
  d.Q.resize(static_cast<Eigen::Index>(q_rows.size()), K);
  for (Eigen::Index j = 0; j < d.Q.rows(); ++j) {
    if (static_cast<Eigen::Index>(q_rows[j].size()) != K)
      throw IoError("ragged row in " + q_path);
    for (Eigen::Index k = 0; k < K; ++k) d.Q(j, k) = static_cast<int>(q_rows[j][k]);
  }
  d.validate();
  return d;
}

inline void write_m2pl_csv(const M2plData& d, const std::string& responses_path,
                           const std::string& q_path) {
  {
    std::ofstream out(responses_path);
    if (!out) throw IoError("cannot write " + responses_path);
    for (Eigen::Index j = 0; j < d.Y.cols(); ++j) out << (j ? "," : "") << "item_" << (j + 1);
    out << "\n";
    for (Eigen::Index i = 0; i < d.Y.rows(); ++i) {
      for (Eigen::Index j = 0; j < d.Y.cols(); ++j)
        out << (j ? "," : "") << static_cast<int>(d.Y(i, j));
      out << "\n";
    }
  }
  std::ofstream out(q_path);
  if (!out) throw IoError("cannot write " + q_path);
  for (Eigen::Index k = 0; k < d.Q.cols(); ++k) out << (k ? "," : "") << "factor_" << (k + 1);
  out << "\n";
  for (Eigen::Index j = 0; j < d.Q.rows(); ++j) {
    for (Eigen::Index k = 0; k < d.Q.cols(); ++k) out << (k ? "," : "") << d.Q(j, k);
    out << "\n";
  }
}

inline MultilevelData read_multilevel_csv(const std::string& path) {
  std::vector<std::string> header;
  const auto rows = csv_detail::read_numeric_csv(path, &header);
  if (header.size() < 3) throw IoError("multilevel CSV needs level2_id,y,x_1.. columns: " + path);
  const Eigen::Index K = static_cast<Eigen::Index>(header.size()) - 2;
  MultilevelData d;
  d.K = K;
  std::vector<std::vector<double>> ys;
  std::vector<std::vector<Eigen::VectorXd>> xs;
  long long current_id = -1;
  for (const auto& row : rows) {
    if (static_cast<Eigen::Index>(row.size()) != K + 2) throw IoError("ragged row in " + path);
    const long long id = static_cast<long long>(row[0]);
    if (ys.empty() || id != current_id) {
      current_id = id;
      ys.emplace_back();
      xs.emplace_back();
    }
    ys.back().push_back(row[1]);
    Eigen::VectorXd x(K);
    for (Eigen::Index k = 0; k < K; ++k) x(k) = row[2 + static_cast<std::size_t>(k)];
    xs.back().push_back(std::move(x));
  }
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const Eigen::Index Ji = static_cast<Eigen::Index>(ys[i].size());
    Eigen::VectorXd y(Ji);
    Eigen::MatrixXd X(Ji, K);
    for (Eigen::Index j = 0; j < Ji; ++j) {
      y(j) = ys[i][static_cast<std::size_t>(j)];
      X.row(j) = xs[i][static_cast<std::size_t>(j)].transpose();
    }
    d.y.push_back(std::move(y));
    d.X.push_back(std::move(X));
  }
  d.validate();
  return d;
}

inline void write_multilevel_csv(const MultilevelData& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "level2_id,y";
  for (Eigen::Index k = 0; k < d.K; ++k) out << ",x_" << (k + 1);
  out << "\n";
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    for (Eigen::Index j = 0; j < d.y[static_cast<std::size_t>(i)].size(); ++j) {
      out << (i + 1) << "," << static_cast<int>(d.y[static_cast<std::size_t>(i)](j));
      for (Eigen::Index k = 0; k < d.K; ++k)
        out << "," << csv_detail::format_double(d.X[static_cast<std::size_t>(i)](j, k));
      out << "\n";
    }
  }
}

inline void write_matrix_csv(const Eigen::Ref<const Eigen::MatrixXd>& m, const std::string& path,
                             const std::string& col_prefix) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (Eigen::Index c = 0; c < m.cols(); ++c) out << (c ? "," : "") << col_prefix << (c + 1);
  out << "\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      out << (c ? "," : "") << csv_detail::format_double(m(r, c));
    out << "\n";
  }
}

inline Eigen::MatrixXd read_matrix_csv(const std::string& path) {
  const auto rows = csv_detail::read_numeric_csv(path, nullptr);
  if (rows.empty()) throw IoError("no rows in " + path);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()),
                    static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != m.cols())
      throw IoError("ragged row in " + path);
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
  }
  return m;
}

}  // namespace somala
