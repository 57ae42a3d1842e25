#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <utility>

#include <json.hpp>

namespace hopbo::gp {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Hyperparameters of the product ARD-Matern-3/2 kernel over stacked
/// (context, action) inputs. The two factor kernels are unit-variance;
/// the single signal variance scales their product.
struct KernelParams {
  VectorXd context_lengthscales;  // one per context dimension
  VectorXd action_lengthscales;   // one per action slot
  double signal_variance = 0.25;
  double noise_variance = 1e-4;

  int context_dim() const { return static_cast<int>(context_lengthscales.size()); }
  int input_dim() const {
    return static_cast<int>(context_lengthscales.size() + action_lengthscales.size());
  }

  void validate() const {
    if ((context_lengthscales.array() <= 0.0).any() ||
        (action_lengthscales.array() <= 0.0).any())
      throw std::invalid_argument("kernel: lengthscales must be positive");
    if (!(signal_variance > 0.0))
      throw std::invalid_argument("kernel: signal variance must be positive");
    if (!(noise_variance >= 0.0))
      throw std::invalid_argument("kernel: noise variance must be non-negative");
  }
};

/// Unit-variance Matern-3/2 factor evaluated at an ARD-weighted squared
/// distance: k = (1 + sqrt(3) r) exp(-sqrt(3) r).
inline double matern32(double dist_sq) {
  if (dist_sq < 0.0) throw std::invalid_argument("matern32: squared distance must be >= 0");
  constexpr double sqrt3 = 1.7320508075688772;
  const double r = std::sqrt(dist_sq);
  return (1.0 + sqrt3 * r) * std::exp(-sqrt3 * r);
}

namespace detail {
template <typename A, typename B>
double weighted_sqdist(const A& a, const B& b, const VectorXd& ls) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < ls.size(); ++i) {
    const double d = (a[i] - b[i]) / ls[i];
    s += d * d;
  }
  return s;
}
}  // namespace detail

/// Kernel between two stacked [context, action] input rows.
inline double pair_kernel(const VectorXd& x, const VectorXd& y, const KernelParams& kp) {
  if (x.size() != kp.input_dim() || y.size() != kp.input_dim())
    throw std::invalid_argument("pair_kernel: input dimension mismatch");
  const int nc = kp.context_dim();
  const double kz = matern32(detail::weighted_sqdist(x.head(nc), y.head(nc),
                                                     kp.context_lengthscales));
  const double ks = matern32(detail::weighted_sqdist(x.tail(x.size() - nc),
                                                     y.tail(y.size() - nc),
                                                     kp.action_lengthscales));
  return kp.signal_variance * kz * ks;
}

/// Exact GP regression of refined merit over context-action pairs, with a
/// zero prior mean and a cached Cholesky factor of K + sigma_n^2 I.
///
/// Observations are appended with a rank-1 Cholesky extension; if that loses
/// positive definiteness (duplicate inputs with zero noise) the factor is
/// rebuilt with escalating diagonal jitter, 1e-10 up to 1e-6.
class GpState {
public:
  explicit GpState(KernelParams params) : params_(std::move(params)) {
    params_.validate();
    X_.resize(0, params_.input_dim());
    m_.resize(0);
    L_.resize(0, 0);
  }

  int size() const { return static_cast<int>(m_.size()); }
  int input_dim() const { return params_.input_dim(); }
  int context_dim() const { return params_.context_dim(); }
  const KernelParams& params() const { return params_; }
  const MatrixXd& observations() const { return X_; }
  const VectorXd& merits() const { return m_; }

  void add_observation(const VectorXd& x, double merit) {
    if (x.size() != params_.input_dim())
      throw std::invalid_argument("gp: observation dimension mismatch");
    if (!(std::abs(merit) < 1.0))
      throw std::invalid_argument("gp: refined merit must lie in (-1, 1)");
    const int n = size();
    VectorXd k_new(n);
    for (int i = 0; i < n; ++i) k_new[i] = pair_kernel(X_.row(i).transpose(), x, params_);
    X_.conservativeResize(n + 1, Eigen::NoChange);
    X_.row(n) = x.transpose();
    m_.conservativeResize(n + 1);
    m_[n] = merit;
    if (!append_cholesky(k_new)) rebuild_cholesky();
    alpha_valid_ = false;
  }

  struct Posterior {
    VectorXd mean;
    VectorXd stddev;
  };

  /// Posterior from precomputed cross-covariances: K(queries, X) and the
  /// prior variances K(query, query). Shared by the generic entry points
  /// and callers that assemble cross-covariances from cached kernel blocks.
  Posterior posterior_from_cross(const MatrixXd& cross, const VectorXd& prior_var) const {
    const int n = size();
    const Eigen::Index q = cross.rows();
    Posterior post;
    if (n == 0) {
      post.mean = VectorXd::Zero(q);
      post.stddev = prior_var.array().max(0.0).sqrt();
      return post;
    }
    post.mean = cross * alpha();
    const MatrixXd v = L_.triangularView<Eigen::Lower>().solve(cross.transpose());
    post.stddev =
        (prior_var - v.colwise().squaredNorm().transpose()).array().max(0.0).sqrt();
    return post;
  }

  VectorXd mean_from_cross(const MatrixXd& cross) const {
    if (size() == 0) return VectorXd::Zero(cross.rows());
    return cross * alpha();
  }

  Posterior posterior(const MatrixXd& queries) const {
    return posterior_from_cross(cross_covariance(queries),
                                VectorXd::Constant(queries.rows(), params_.signal_variance));
  }

  VectorXd posterior_mean(const MatrixXd& queries) const {
    return mean_from_cross(cross_covariance(queries));
  }

  MatrixXd cross_covariance(const MatrixXd& queries) const {
    if (queries.cols() != params_.input_dim())
      throw std::invalid_argument("gp: query dimension mismatch");
    MatrixXd cross(queries.rows(), size());
    for (Eigen::Index r = 0; r < queries.rows(); ++r)
      for (int i = 0; i < size(); ++i)
        cross(r, i) =
            pair_kernel(queries.row(r).transpose(), X_.row(i).transpose(), params_);
    return cross;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["format_version"] = 1;
    j["context_lengthscales"] =
        std::vector<double>(params_.context_lengthscales.begin(),
                            params_.context_lengthscales.end());
    j["action_lengthscales"] = std::vector<double>(params_.action_lengthscales.begin(),
                                                   params_.action_lengthscales.end());
    j["signal_variance"] = params_.signal_variance;
    j["noise_variance"] = params_.noise_variance;
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < size(); ++i) {
      nlohmann::json row = nlohmann::json::array();
      for (Eigen::Index c = 0; c < X_.cols(); ++c) row.push_back(X_(i, c));
      rows.push_back(std::move(row));
    }
    j["X"] = std::move(rows);
    j["m"] = std::vector<double>(m_.begin(), m_.end());
    return j;
  }

  static GpState from_json(const nlohmann::json& j) {
    if (!j.contains("format_version") || j.at("format_version").get<int>() != 1)
      throw std::runtime_error("gp model: unsupported format version");
    KernelParams kp;
    const auto cl = j.at("context_lengthscales").get<std::vector<double>>();
    const auto al = j.at("action_lengthscales").get<std::vector<double>>();
    kp.context_lengthscales = Eigen::Map<const VectorXd>(cl.data(), cl.size());
    kp.action_lengthscales = Eigen::Map<const VectorXd>(al.data(), al.size());
    kp.signal_variance = j.at("signal_variance").get<double>();
    kp.noise_variance = j.at("noise_variance").get<double>();
    GpState gp(kp);
    const auto merits = j.at("m").get<std::vector<double>>();
    const auto& rows = j.at("X");
    if (rows.size() != merits.size())
      throw std::runtime_error("gp model: X and m lengths differ");
    for (size_t i = 0; i < merits.size(); ++i) {
      const auto row = rows[i].get<std::vector<double>>();
      gp.add_observation(Eigen::Map<const VectorXd>(row.data(), row.size()), merits[i]);
    }
    return gp;
  }

private:
  VectorXd alpha() const {
    if (!alpha_valid_) {
      alpha_ = L_.triangularView<Eigen::Lower>().solve(m_);
      L_.triangularView<Eigen::Lower>().transpose().solveInPlace(alpha_);
      alpha_valid_ = true;
    }
    return alpha_;
  }

  bool append_cholesky(const VectorXd& k_new) {
    const int n = static_cast<int>(L_.rows());
    const double diag = params_.signal_variance + params_.noise_variance + jitter_;
    L_.conservativeResize(n + 1, n + 1);
    L_.row(n).setZero();
    L_.col(n).setZero();
    if (n > 0) {
      const VectorXd a = L_.topLeftCorner(n, n).triangularView<Eigen::Lower>().solve(k_new);
      const double d2 = diag - a.squaredNorm();
      if (d2 <= 1e-12 * diag) return false;
      L_.row(n).head(n) = a.transpose();
      L_(n, n) = std::sqrt(d2);
    } else {
      L_(0, 0) = std::sqrt(diag);
    }
    return true;
  }

  void rebuild_cholesky() {
    const int n = size();
    MatrixXd k(n, n);
    for (int i = 0; i < n; ++i)
      for (int jj = 0; jj <= i; ++jj) {
        k(i, jj) = pair_kernel(X_.row(i).transpose(), X_.row(jj).transpose(), params_);
        k(jj, i) = k(i, jj);
      }
    double jitter = std::max(jitter_, 1e-10);
    for (;; jitter *= 10.0) {
      MatrixXd reg = k;
      reg.diagonal().array() += params_.noise_variance + jitter;
      Eigen::LLT<MatrixXd> llt(reg);
      if (llt.info() == Eigen::Success) {
        L_ = llt.matrixL();
        jitter_ = jitter;
        return;
      }
      if (jitter >= 1e-6)
        throw std::runtime_error("gp: covariance factorization failed at maximum jitter");
    }
  }

  KernelParams params_;
  MatrixXd X_;
  VectorXd m_;
  MatrixXd L_;
  double jitter_ = 0.0;
  mutable VectorXd alpha_;
  mutable bool alpha_valid_ = false;
};

}  // namespace hopbo::gp
