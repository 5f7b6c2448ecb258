#pragma once

// Scaled negative composite log-likelihoods, gradients and the blockwise
// Lipschitz constant. Coefficients are stored as an M x (p+1) matrix (one row
// per quadrature point); Eigen's column-major storage keeps each covariate
// block contiguous.

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "svci/common.hpp"
#include "svci/quadrature.hpp"

namespace svci {

using Coefficients = Eigen::MatrixXd;

inline constexpr double kEtaMax = 50.0;
inline constexpr double kLipschitzFloor = 1e-12;

namespace detail {

inline void check_shape(const QuadratureScheme& q, const Coefficients& beta) {
  require(beta.rows() == q.design.rows() && beta.cols() == q.design.cols(), ErrorKind::dimension,
          "coefficient matrix is " + std::to_string(beta.rows()) + "x" + std::to_string(beta.cols()) +
              ", scheme needs " + std::to_string(q.design.rows()) + "x" + std::to_string(q.design.cols()));
}

inline double eta(const QuadratureScheme& q, const Coefficients& beta, Eigen::Index i, double eta_max) {
  const double e = q.design.row(i).dot(beta.row(i));
  return std::clamp(e, -eta_max, eta_max);
}

// log(1 + e^x) without overflow.
inline double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void check_baseline(const QuadratureScheme& q) {
  require(q.baseline.size() == q.design.rows() && (q.baseline.array() > 0.0).all(), ErrorKind::invalid_argument,
          "logistic scheme needs positive baseline at every point");
}

}  // namespace detail

inline double poisson_negll(const QuadratureScheme& q, const Coefficients& beta, double eta_max = kEtaMax) {
  detail::check_shape(q, beta);
  double s = 0.0;
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    const double e = detail::eta(q, beta, i, eta_max);
    s += q.weights(i) * std::exp(e) - (q.observed[static_cast<std::size_t>(i)] ? e : 0.0);
  }
  return s / q.measure;
}

inline double logistic_negll(const QuadratureScheme& q, const Coefficients& beta, double eta_max = kEtaMax) {
  detail::check_shape(q, beta);
  detail::check_baseline(q);
  double s = 0.0;
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    const double x = detail::eta(q, beta, i, eta_max) - std::log(q.baseline(i));
    s += q.observed[static_cast<std::size_t>(i)] ? detail::log1pexp(-x) : detail::log1pexp(x);
  }
  return s / q.measure;
}

inline double negll(const QuadratureScheme& q, const Coefficients& beta, double eta_max = kEtaMax) {
  return q.kind == LikelihoodKind::poisson ? poisson_negll(q, beta, eta_max) : logistic_negll(q, beta, eta_max);
}

/// Per-point scalar factor c_i such that gradient row i = c_i * z_i.
inline Eigen::VectorXd gradient_factors(const QuadratureScheme& q, const Coefficients& beta,
                                        double eta_max = kEtaMax) {
  detail::check_shape(q, beta);
  if (q.kind == LikelihoodKind::logistic) detail::check_baseline(q);
  Eigen::VectorXd c(beta.rows());
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    const double e = detail::eta(q, beta, i, eta_max);
    const double obs = q.observed[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    if (q.kind == LikelihoodKind::poisson) c(i) = (q.weights(i) * std::exp(e) - obs) / q.measure;
    else c(i) = (detail::sigmoid(e - std::log(q.baseline(i))) - obs) / q.measure;
  }
  return c;
}

/// Gradient of the scaled negative log-likelihood, same shape as beta.
inline Coefficients gradient(const QuadratureScheme& q, const Coefficients& beta, double eta_max = kEtaMax) {
  const Eigen::VectorXd c = gradient_factors(q, beta, eta_max);
  return q.design.array().colwise() * c.array();
}

/// Largest Hessian eigenvalue. The Hessian is block diagonal with rank-one
/// blocks w_i z_i z_i^T, so the maximum is max_i w_i |z_i|^2.
inline double lipschitz(const QuadratureScheme& q, const Coefficients& beta, double eta_max = kEtaMax) {
  detail::check_shape(q, beta);
  double l = 0.0;
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    const double e = detail::eta(q, beta, i, eta_max);
    double w;
    if (q.kind == LikelihoodKind::poisson) {
      w = q.weights(i) * std::exp(e);
    } else {
      const double s = detail::sigmoid(e - std::log(q.baseline(i)));
      w = s * (1.0 - s);
    }
    l = std::max(l, w * q.design.row(i).squaredNorm() / q.measure);
  }
  return std::max(l, kLipschitzFloor);
}

}  // namespace svci
