#pragma once

#include <Eigen/Core>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "somala/chol.hpp"
#include "somala/dataset.hpp"
#include "somala/errors.hpp"
#include "somala/param_vector.hpp"

namespace somala {

inline double log1pexp(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

/// N x K matrix of current latent samples, one row per observation.
using LatentState = Eigen::MatrixXd;

/// Per-iterate derived quantities shared read-only by every per-observation
/// evaluation: the Cholesky factor, its inverse, Sigma^{-1}, and the prior
/// mean. Built once per parameter update.
struct ParamCache {
  ParamVector beta;
  Eigen::MatrixXd L;
  Eigen::MatrixXd L_inv;
  Eigen::MatrixXd sigma;
  Eigen::MatrixXd sigma_inv;
  double log_det_sigma = 0.0;
  Eigen::VectorXd prior_mean;
  Eigen::MatrixXd loadings;  // m2pl only: J x K with zeros where q_jk = 0
};

/// A continuous latent variable model bound to its dataset. All evaluation
/// methods are pure functions of (cache, i, xi) and safe to call from any
/// number of threads.
class LatentModel {
 public:
  virtual ~LatentModel() = default;

  virtual ModelKind kind() const = 0;
  virtual Eigen::Index latent_dim() const = 0;
  virtual Eigen::Index n_obs() const = 0;
  virtual std::shared_ptr<const BlockLayout> layout() const = 0;
  virtual bool constrained() const = 0;

  ParamCache make_cache(const ParamVector& beta) const {
    if (beta.dim() != layout()->dim())
      throw ConfigError("parameter vector does not match model layout");
    ParamCache c;
    c.beta = beta;
    const Eigen::Index k = latent_dim();
    c.L = chol_unpack(beta.block("chol"), k);
    c.log_det_sigma = 0.0;
    for (Eigen::Index r = 0; r < k; ++r) {
      if (c.L(r, r) < 1e-12)
        throw DivergenceError("Cholesky diagonal below 1e-12; Sigma is singular");
      c.log_det_sigma += 2.0 * std::log(c.L(r, r));
    }
    c.L_inv = c.L.triangularView<Eigen::Lower>().solve(Eigen::MatrixXd::Identity(k, k));
    c.sigma = c.L * c.L.transpose();
    c.sigma_inv = c.L_inv.transpose() * c.L_inv;
    fill_cache(c);
    return c;
  }

  /// log f_i(Y_i, xi_i | beta): Bernoulli terms plus the Gaussian prior.
  double complete_data_loglik(const ParamCache& c, Eigen::Index i,
                              const Eigen::Ref<const Eigen::VectorXd>& xi) const {
    check_latent(xi);
    return conditional_loglik(c, i, xi) + prior_loglik(c, xi);
  }

  /// log f(Y_i | xi_i, beta), the response part only.
  virtual double conditional_loglik(const ParamCache& c, Eigen::Index i,
                                    const Eigen::Ref<const Eigen::VectorXd>& xi) const = 0;

  /// Gradient of the potential U_i = -log f_i with respect to xi_i.
  virtual Eigen::VectorXd grad_latent(const ParamCache& c, Eigen::Index i,
                                      const Eigen::Ref<const Eigen::VectorXd>& xi) const = 0;

  /// Per-observation gradient of log f_i with respect to every beta entry.
  virtual Eigen::VectorXd grad_params(const ParamCache& c, Eigen::Index i,
                                      const Eigen::Ref<const Eigen::VectorXd>& xi) const = 0;

  /// Diagonal of the Hessian of log f_i with respect to beta. The base
  /// implementation runs central differences of grad_params; both concrete
  /// models override it with analytic forms.
  virtual Eigen::VectorXd hessian_diag(const ParamCache& c, Eigen::Index i,
                                       const Eigen::Ref<const Eigen::VectorXd>& xi) const {
    const Eigen::Index p = layout()->dim();
    Eigen::VectorXd h(p);
    for (Eigen::Index q = 0; q < p; ++q) {
      const double step = 1e-5 * std::max(1.0, std::abs(c.beta.values(q)));
      ParamVector up = c.beta;
      ParamVector dn = c.beta;
      up.values(q) += step;
      dn.values(q) -= step;
      const double gu = grad_params(make_cache(up), i, xi)(q);
      const double gd = grad_params(make_cache(dn), i, xi)(q);
      h(q) = (gu - gd) / (2.0 * step);
    }
    return h;
  }

  /// Projection onto the model's parameter space. Unconstrained models
  /// return beta unchanged; the M2PL rescales Cholesky rows to unit norm.
  ParamVector project(ParamVector beta) const {
    if (!constrained()) return beta;
    const Eigen::Index k = latent_dim();
    Eigen::MatrixXd L = chol_unpack(beta.block("chol"), k);
    L = chol_normalize_rows(std::move(L));
    beta.block("chol") = chol_pack(L);
    return beta;
  }

  /// Gaussian prior log-density of xi under the cached (mean, Sigma).
  double prior_loglik(const ParamCache& c, const Eigen::Ref<const Eigen::VectorXd>& xi) const {
    const Eigen::Index k = latent_dim();
    const Eigen::VectorXd w = c.L_inv * (xi - c.prior_mean);
    return -0.5 * static_cast<double>(k) * std::log(2.0 * std::numbers::pi) -
           0.5 * c.log_det_sigma - 0.5 * w.squaredNorm();
  }

 protected:
  virtual void fill_cache(ParamCache& c) const = 0;

  static void check_latent(const Eigen::Ref<const Eigen::VectorXd>& xi) {
    if (!xi.allFinite()) throw DivergenceError("non-finite latent value");
  }

  /// Lower-triangular block of d log phi / dL packed flat; z is centred.
  static Eigen::VectorXd chol_grad(const ParamCache& c,
                                   const Eigen::Ref<const Eigen::VectorXd>& z) {
    const Eigen::VectorXd u = c.sigma_inv * z;
    const Eigen::MatrixXd g = u * (c.L.transpose() * u).transpose() - c.sigma_inv * c.L;
    return chol_pack(g);
  }

  /// Diagonal of the Hessian of log phi with respect to the packed L entries:
  /// for entry (a,b), Linv(b,a)^2 - w_b^2 SigmaInv(a,a) - 2 u_a w_b Linv(b,a)
  /// with w = L^{-1} z and u = Sigma^{-1} z.
  static Eigen::VectorXd chol_hessian_diag(const ParamCache& c,
                                           const Eigen::Ref<const Eigen::VectorXd>& z) {
    const Eigen::Index k = c.L.rows();
    const Eigen::VectorXd w = c.L_inv * z;
    const Eigen::VectorXd u = c.L_inv.transpose() * w;
    Eigen::VectorXd h(chol_flat_size(k));
    Eigen::Index idx = 0;
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b <= a; ++b) {
        const double linv_ba = c.L_inv(b, a);
        h(idx++) = linv_ba * linv_ba - w(b) * w(b) * c.sigma_inv(a, a) -
                   2.0 * u(a) * w(b) * linv_ba;
      }
    return h;
  }
};

// ---------------------------------------------------------------------------

class MultilevelModel final : public LatentModel {
 public:
  explicit MultilevelModel(MultilevelData data) : data_(std::move(data)) {
    data_.validate();
    auto layout = std::make_shared<BlockLayout>();
    layout->add_block("mu", data_.K);
    layout->add_block("chol", chol_flat_size(data_.K));
    layout_ = std::move(layout);
  }

  ModelKind kind() const override { return ModelKind::multilevel; }
  Eigen::Index latent_dim() const override { return data_.K; }
  Eigen::Index n_obs() const override { return data_.n(); }
  std::shared_ptr<const BlockLayout> layout() const override { return layout_; }
  bool constrained() const override { return false; }
  const MultilevelData& data() const { return data_; }

  double conditional_loglik(const ParamCache&, Eigen::Index i,
                            const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    const auto& X = data_.X[static_cast<std::size_t>(i)];
    const auto& y = data_.y[static_cast<std::size_t>(i)];
    const Eigen::VectorXd eta = X * xi;
    double ll = 0.0;
    for (Eigen::Index j = 0; j < eta.size(); ++j) ll += y(j) * eta(j) - log1pexp(eta(j));
    return ll;
  }

  Eigen::VectorXd grad_latent(const ParamCache& c, Eigen::Index i,
                              const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    const auto& X = data_.X[static_cast<std::size_t>(i)];
    const auto& y = data_.y[static_cast<std::size_t>(i)];
    const Eigen::VectorXd eta = X * xi;
    Eigen::VectorXd resid(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j) resid(j) = sigmoid(eta(j)) - y(j);
    return X.transpose() * resid + c.sigma_inv * (xi - c.prior_mean);
  }

  Eigen::VectorXd grad_params(const ParamCache& c, Eigen::Index i,
                              const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    (void)i;
    Eigen::VectorXd g(layout_->dim());
    const Eigen::VectorXd z = xi - c.prior_mean;
    g.head(data_.K) = c.sigma_inv * z;
    g.tail(chol_flat_size(data_.K)) = chol_grad(c, z);
    return g;
  }

  Eigen::VectorXd hessian_diag(const ParamCache& c, Eigen::Index i,
                               const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    (void)i;
    Eigen::VectorXd h(layout_->dim());
    h.head(data_.K) = -c.sigma_inv.diagonal();
    h.tail(chol_flat_size(data_.K)) = chol_hessian_diag(c, xi - c.prior_mean);
    return h;
  }

 protected:
  void fill_cache(ParamCache& c) const override { c.prior_mean = c.beta.block("mu"); }

 private:
  MultilevelData data_;
  std::shared_ptr<const BlockLayout> layout_;
};

// ---------------------------------------------------------------------------

class M2plModel final : public LatentModel {
 public:
  explicit M2plModel(M2plData data) : data_(std::move(data)) {
    data_.validate();
    const Eigen::Index J = data_.n_items();
    const Eigen::Index K = data_.K();
    loading_index_ = Eigen::MatrixXi::Constant(J, K, -1);
    Eigen::Index a_count = 0;
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index k = 0; k < K; ++k)
        if (data_.Q(j, k) == 1) loading_index_(j, k) = static_cast<int>(a_count++);
    auto layout = std::make_shared<BlockLayout>();
    layout->add_block("d", J);
    layout->add_block("a", a_count);
    layout->add_block("chol", chol_flat_size(K));
    layout_ = std::move(layout);
  }

  ModelKind kind() const override { return ModelKind::m2pl; }
  Eigen::Index latent_dim() const override { return data_.K(); }
  Eigen::Index n_obs() const override { return data_.n(); }
  std::shared_ptr<const BlockLayout> layout() const override { return layout_; }
  bool constrained() const override { return true; }
  const M2plData& data() const { return data_; }

  /// Flat index of a_{jk} within the "a" block, or -1 when q_jk = 0.
  int loading_index(Eigen::Index j, Eigen::Index k) const { return loading_index_(j, k); }

  double conditional_loglik(const ParamCache& c, Eigen::Index i,
                            const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    const Eigen::VectorXd eta = item_predictors(c, xi);
    double ll = 0.0;
    for (Eigen::Index j = 0; j < eta.size(); ++j)
      ll += data_.Y(i, j) * eta(j) - log1pexp(eta(j));
    return ll;
  }

  Eigen::VectorXd grad_latent(const ParamCache& c, Eigen::Index i,
                              const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    const Eigen::VectorXd eta = item_predictors(c, xi);
    Eigen::VectorXd resid(eta.size());
    for (Eigen::Index j = 0; j < eta.size(); ++j) resid(j) = sigmoid(eta(j)) - data_.Y(i, j);
    return c.loadings.transpose() * resid + c.sigma_inv * xi;
  }

  Eigen::VectorXd grad_params(const ParamCache& c, Eigen::Index i,
                              const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    const Eigen::Index J = data_.n_items();
    const Eigen::Index K = data_.K();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(layout_->dim());
    const Eigen::VectorXd eta = item_predictors(c, xi);
    const Eigen::Index a_offset = layout_->block("a").offset;
    for (Eigen::Index j = 0; j < J; ++j) {
      const double score = data_.Y(i, j) - sigmoid(eta(j));
      g(j) = score;
      for (Eigen::Index k = 0; k < K; ++k) {
        const int idx = loading_index_(j, k);
        if (idx >= 0) g(a_offset + idx) = score * xi(k);
      }
    }
    g.tail(chol_flat_size(K)) = chol_grad(c, xi);
    return g;
  }

  Eigen::VectorXd hessian_diag(const ParamCache& c, Eigen::Index i,
                               const Eigen::Ref<const Eigen::VectorXd>& xi) const override {
    check_latent(xi);
    (void)i;  // the Bernoulli curvature -p(1-p) does not involve Y_i
    const Eigen::Index J = data_.n_items();
    const Eigen::Index K = data_.K();
    Eigen::VectorXd h = Eigen::VectorXd::Zero(layout_->dim());
    const Eigen::VectorXd eta = item_predictors(c, xi);
    const Eigen::Index a_offset = layout_->block("a").offset;
    for (Eigen::Index j = 0; j < J; ++j) {
      const double p = sigmoid(eta(j));
      const double fisher = -p * (1.0 - p);
      h(j) = fisher;
      for (Eigen::Index k = 0; k < K; ++k) {
        const int idx = loading_index_(j, k);
        if (idx >= 0) h(a_offset + idx) = fisher * xi(k) * xi(k);
      }
    }
    h.tail(chol_flat_size(K)) = chol_hessian_diag(c, xi);
    return h;
  }

 protected:
  void fill_cache(ParamCache& c) const override {
    const Eigen::Index J = data_.n_items();
    const Eigen::Index K = data_.K();
    c.prior_mean = Eigen::VectorXd::Zero(K);
    c.loadings = Eigen::MatrixXd::Zero(J, K);
    const auto a = c.beta.block("a");
    for (Eigen::Index j = 0; j < J; ++j)
      for (Eigen::Index k = 0; k < K; ++k) {
        const int idx = loading_index_(j, k);
        if (idx >= 0) c.loadings(j, k) = a(idx);
      }
  }

 private:
  Eigen::VectorXd item_predictors(const ParamCache& c,
                                  const Eigen::Ref<const Eigen::VectorXd>& xi) const {
    return c.beta.block("d") + (c.loadings * xi);
  }

  M2plData data_;
  std::shared_ptr<const BlockLayout> layout_;
  Eigen::MatrixXi loading_index_;
};

inline std::unique_ptr<LatentModel> make_model(const Dataset& dataset) {
  if (dataset.kind() == ModelKind::multilevel)
    return std::make_unique<MultilevelModel>(dataset.multilevel());
  return std::make_unique<M2plModel>(dataset.m2pl());
}

}  // namespace somala
