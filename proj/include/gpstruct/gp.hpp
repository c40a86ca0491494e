#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "gpstruct/errors.hpp"
#include "gpstruct/kernel.hpp"

namespace gpstruct {

/// Affine map between raw and internal (standardized) units:
/// internal = (raw - shift) / scale.
struct AffineMap {
  double scale = 1.0;
  double shift = 0.0;
  double to_internal(double raw) const { return (raw - shift) / scale; }
  double to_raw(double internal) const { return internal * scale + shift; }
};

/// Observations in standardized units, with the transforms that produced
/// them retained for mapping predictions back to raw units.
struct Dataset {
  Vector xs;
  Vector ys;
  AffineMap x_map;
  AffineMap y_map;
};

inline void check_dataset(const Dataset& data) {
  if (data.xs.size() != data.ys.size())
    throw std::invalid_argument("dataset: xs and ys differ in length");
  if (data.xs.size() < 1) throw std::invalid_argument("dataset: empty");
  if (!data.xs.allFinite() || !data.ys.allFinite())
    throw std::invalid_argument("dataset: non-finite values");
}

/// Predictive for y* at one query point; variance includes observation noise.
struct GaussianPrediction {
  double mean = 0.0;
  double variance = 0.0;
};

/// Diagonal inflation attempted in order until the Cholesky succeeds.
inline constexpr std::array<double, 3> kJitterLadder{1e-8, 1e-6, 1e-4};

inline constexpr double kVarianceFloor = 1e-12;

namespace detail {

/// Per-node Gram matrices of a composite kernel, kept for gradient
/// accumulation (a product node scales each side's gradients by the other
/// side's values).
struct NodeEval {
  Matrix value;
  std::unique_ptr<NodeEval> left, right;
};

inline NodeEval eval_tree(const KernelExpr& e, const double* u, int& offset, const Vector& xs) {
  NodeEval ne;
  if (e.is_leaf()) {
    const auto cp = constrain_leaf(e.kind(), u + offset);
    offset += arity(e.kind());
    ne.value = leaf_gram(e.kind(), cp.data(), xs);
    return ne;
  }
  ne.left = std::make_unique<NodeEval>(eval_tree(e.left(), u, offset, xs));
  ne.right = std::make_unique<NodeEval>(eval_tree(e.right(), u, offset, xs));
  ne.value = e.tag() == KernelExpr::Tag::Sum
                 ? Matrix(ne.left->value + ne.right->value)
                 : Matrix(ne.left->value.cwiseProduct(ne.right->value));
  return ne;
}

/// g[t] += sum_ij W(i,j) * dK_leaf(i,j)/d eta_t, exploiting symmetry of W and
/// dK (off-diagonal entries counted twice).
inline void leaf_contract(BaseKind kind, const double* cp, const Vector& xs, const Matrix& W,
                          double* g) {
  const int a = arity(kind);
  const Eigen::Index n = xs.size();
  double k, d[3];
  double acc[3] = {0.0, 0.0, 0.0};
  for (Eigen::Index j = 0; j < n; ++j) {
    for (Eigen::Index i = 0; i <= j; ++i) {
      leaf_value_and_grads(kind, cp, xs[i], xs[j], k, d);
      const double w = (i == j) ? W(i, j) : 2.0 * W(i, j);
      for (int t = 0; t < a; ++t) acc[t] += w * d[t];
    }
  }
  for (int t = 0; t < a; ++t) g[t] += acc[t];
}

inline void grad_walk(const KernelExpr& e, const NodeEval& ne, const double* u, int& offset,
                      const Vector& xs, const Matrix& W, double* g) {
  if (e.is_leaf()) {
    const auto cp = constrain_leaf(e.kind(), u + offset);
    leaf_contract(e.kind(), cp.data(), xs, W, g + offset);
    offset += arity(e.kind());
    return;
  }
  if (e.tag() == KernelExpr::Tag::Sum) {
    grad_walk(e.left(), *ne.left, u, offset, xs, W, g);
    grad_walk(e.right(), *ne.right, u, offset, xs, W, g);
  } else {
    grad_walk(e.left(), *ne.left, u, offset, xs, Matrix(W.cwiseProduct(ne.right->value)), g);
    grad_walk(e.right(), *ne.right, u, offset, xs, Matrix(W.cwiseProduct(ne.left->value)), g);
  }
}

}  // namespace detail

/// One fitted GP: Cholesky factor of K_y = K + (sigma_n^2 + jitter) I, with
/// the smallest jitter from the ladder that factorizes. Everything downstream
/// (marginal likelihood, its gradient, predictions) reuses this factorization.
class GpModel {
 public:
  static GpModel fit(const KernelExpr& expr, const HyperParams& params, const Dataset& data) {
    check_layout(expr, params);
    check_dataset(data);
    GpModel m;
    m.expr_ = expr;
    m.params_ = params;
    m.xs_ = data.xs;
    const Eigen::Index n = data.xs.size();

    int offset = 0;
    m.tree_ = detail::eval_tree(expr, params.values.data(), offset, data.xs);
    const Matrix& K = m.tree_.value;
    const double log_noise = params.values[params.values.size() - 1];
    m.noise_var_ = std::exp(2.0 * log_noise);
    if (!K.allFinite() || !std::isfinite(m.noise_var_))
      throw NumericalError("covariance has non-finite entries", 0.0);

    for (double jit : kJitterLadder) {
      Matrix Ky = K;
      Ky.diagonal().array() += m.noise_var_ + jit;
      m.chol_.compute(Ky);
      if (m.chol_.info() != Eigen::Success) continue;
      m.jitter_ = jit;
      m.alpha_ = m.chol_.solve(data.ys);
      const double quad = data.ys.dot(m.alpha_);
      const double log_det = m.chol_.matrixLLT().diagonal().array().log().sum();
      m.log_marginal_ = -0.5 * quad - log_det -
                        0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
      if (!std::isfinite(m.log_marginal_))
        throw NumericalError("non-finite log marginal likelihood", jit);
      return m;
    }
    throw NumericalError("Cholesky failed after jitter ladder", kJitterLadder.back());
  }

  double log_marginal() const { return log_marginal_; }
  double jitter() const { return jitter_; }
  double noise_var() const { return noise_var_; }
  const Vector& alpha() const { return alpha_; }
  const Matrix& gram() const { return tree_.value; }

  /// d log p(y) / d eta_j for every unconstrained entry, via
  /// 1/2 tr((alpha alpha^T - K_y^{-1}) dK_y/d eta_j).
  Vector grad_log_marginal() const {
    const Eigen::Index n = xs_.size();
    Matrix Kinv = chol_.solve(Matrix::Identity(n, n));
    Matrix A = 0.5 * (alpha_ * alpha_.transpose() - Kinv);
    Vector g = Vector::Zero(params_.values.size());
    int offset = 0;
    detail::grad_walk(expr_, tree_, params_.values.data(), offset, xs_, A, g.data());
    // noise entry: dK_y/d log sigma_n = 2 sigma_n^2 I
    g[g.size() - 1] = 2.0 * noise_var_ * A.trace();
    return g;
  }

  /// Posterior predictive for y* (observation noise included) at each query.
  std::vector<GaussianPrediction> predict(const Vector& x_star) const {
    if (!x_star.allFinite()) throw std::invalid_argument("predict: non-finite query");
    const Matrix K_star = cross_gram(expr_, params_, xs_, x_star);  // n x q
    const Vector mean = K_star.transpose() * alpha_;
    const Matrix V = chol_.matrixL().solve(K_star);
    std::vector<GaussianPrediction> out(static_cast<std::size_t>(x_star.size()));
    for (Eigen::Index j = 0; j < x_star.size(); ++j) {
      const double kss = kernel_diag(expr_, params_, x_star[j]);
      double var = kss + noise_var_ - V.col(j).squaredNorm();
      if (var < kVarianceFloor) var = kVarianceFloor;
      out[static_cast<std::size_t>(j)] = {mean[j], var};
    }
    return out;
  }

 private:
  KernelExpr expr_;
  HyperParams params_;
  Vector xs_;
  detail::NodeEval tree_;
  Eigen::LLT<Matrix> chol_;
  Vector alpha_;
  double log_marginal_ = 0.0;
  double jitter_ = 0.0;
  double noise_var_ = 0.0;
};

/// log N(y | 0, K + sigma_n^2 I), Cholesky with jitter escalation.
inline double log_marginal(const KernelExpr& expr, const HyperParams& params,
                           const Dataset& data) {
  return GpModel::fit(expr, params, data).log_marginal();
}

/// Gradient of log_marginal w.r.t. every unconstrained entry (noise last).
inline Vector grad_log_marginal(const KernelExpr& expr, const HyperParams& params,
                                const Dataset& data) {
  return GpModel::fit(expr, params, data).grad_log_marginal();
}

/// Single-model posterior predictive at each query point.
inline std::vector<GaussianPrediction> posterior_predictive(const KernelExpr& expr,
                                                            const HyperParams& params,
                                                            const Dataset& data,
                                                            const Vector& x_star) {
  return GpModel::fit(expr, params, data).predict(x_star);
}

}  // namespace gpstruct
