#pragma once

// Proximal gradient for the fused-lasso penalized composite likelihood. The
// proximal operator is evaluated per coefficient column by ADMM.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "svci/common.hpp"
#include "svci/graph.hpp"
#include "svci/io.hpp"
#include "svci/objective.hpp"

namespace svci {

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

inline Eigen::VectorXd soft_threshold(const Eigen::VectorXd& z, double t) {
  require(t >= 0.0, ErrorKind::invalid_argument, "soft threshold needs t >= 0");
  Eigen::VectorXd out(z.size());
  for (Eigen::Index i = 0; i < z.size(); ++i) out(i) = soft_threshold(z(i), t);
  return out;
}

struct SolverOptions {
  int max_outer = 500;
  double outer_tol = 1e-7;        // relative objective change
  double fixed_point_tol = 1e-6;  // |beta - prox(beta - grad/L)| required at exit
  int admm_max = 200;
  double admm_tol = 1e-6;         // scaled by sqrt(edge count)
  double gamma = 1.0;
  bool adapt_gamma = true;
  bool accelerate = false;
  bool warm_start = true;
  bool polish = true;
  bool refine = true;                // Newton refinement on identified fused groups
  std::size_t refine_max_groups = 20000;
  double refine_trigger = 1e-5;     // relative objective change that triggers refinement
  double eta_max = kEtaMax;
  unsigned threads = 0;
  std::uint64_t seed = 0;

  void validate() const {
    require(max_outer >= 1 && admm_max >= 1, ErrorKind::config, "iteration caps must be >= 1");
    require(outer_tol > 0 && admm_tol > 0 && fixed_point_tol > 0, ErrorKind::config, "tolerances must be positive");
    require(gamma > 0, ErrorKind::config, "gamma must be positive");
  }
};

/// ADMM state carried between prox calls, one entry per coefficient column.
struct ProxWorkspace {
  std::vector<Eigen::VectorXd> theta;
  std::vector<Eigen::VectorXd> dual;
  std::vector<double> gamma;
  std::vector<double> primal_residual;
  std::vector<double> dual_residual;
  std::vector<int> iterations;
  std::vector<std::uint8_t> converged;
  std::vector<std::uint8_t> polished;

  void reset(std::size_t columns, std::size_t edges, double gamma0) {
    theta.assign(columns, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(edges)));
    dual.assign(columns, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(edges)));
    gamma.assign(columns, gamma0);
    primal_residual.assign(columns, 0.0);
    dual_residual.assign(columns, 0.0);
    iterations.assign(columns, 0);
    converged.assign(columns, 1);
    polished.assign(columns, 0);
  }

  bool matches(std::size_t columns, std::size_t edges) const {
    return theta.size() == columns && (columns == 0 || static_cast<std::size_t>(theta[0].size()) == edges);
  }

  double max_primal() const { return primal_residual.empty() ? 0.0 : *std::max_element(primal_residual.begin(), primal_residual.end()); }
  double max_dual() const { return dual_residual.empty() ? 0.0 : *std::max_element(dual_residual.begin(), dual_residual.end()); }
  bool all_converged() const { return std::all_of(converged.begin(), converged.end(), [](auto c) { return c != 0; }); }
};

inline double fused_penalty(const Incidence& inc, const Eigen::VectorXd& b) {
  double s = 0.0;
  for (const auto& e : inc.edge_list()) s += std::abs(b(e.i) - b(e.j));
  return s;
}

inline double fused_penalty(const Incidence& inc, const Coefficients& beta) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < beta.cols(); ++k) s += fused_penalty(inc, Eigen::VectorXd(beta.col(k)));
  return s;
}

inline double prox_objective(const Incidence& inc, const Eigen::VectorXd& b, const Eigen::VectorXd& r, double t) {
  return 0.5 * (b - r).squaredNorm() + t * fused_penalty(inc, b);
}

namespace detail {

// Re-solves the prox with the fusion pattern read off theta held fixed: every
// group of vertices joined by zero-theta edges shares one value, and each cut
// edge contributes its sign. Exact when the pattern and signs are right.
inline Eigen::VectorXd polish_column(const Incidence& inc, const Eigen::VectorXd& r, const Eigen::VectorXd& theta,
                                     double t) {
  const auto& edges = inc.edge_list();
  std::vector<std::uint8_t> fused(edges.size());
  for (std::size_t l = 0; l < edges.size(); ++l) fused[l] = theta(static_cast<Eigen::Index>(l)) == 0.0;
  const auto label = connected_components(inc.vertices(), edges, fused);
  const auto groups = static_cast<std::size_t>(component_count(label));
  std::vector<double> sum(groups, 0.0), size(groups, 0.0), push(groups, 0.0);
  for (std::size_t v = 0; v < inc.vertices(); ++v) {
    sum[static_cast<std::size_t>(label[v])] += r(static_cast<Eigen::Index>(v));
    size[static_cast<std::size_t>(label[v])] += 1.0;
  }
  for (std::size_t l = 0; l < edges.size(); ++l) {
    const auto gi = static_cast<std::size_t>(label[static_cast<std::size_t>(edges[l].i)]);
    const auto gj = static_cast<std::size_t>(label[static_cast<std::size_t>(edges[l].j)]);
    if (gi == gj) continue;
    const double s = theta(static_cast<Eigen::Index>(l)) > 0 ? 1.0 : -1.0;
    push[gi] += s;
    push[gj] -= s;
  }
  Eigen::VectorXd b(static_cast<Eigen::Index>(inc.vertices()));
  for (std::size_t v = 0; v < inc.vertices(); ++v) {
    const auto g = static_cast<std::size_t>(label[v]);
    b(static_cast<Eigen::Index>(v)) = (sum[g] - t * push[g]) / size[g];
  }
  return b;
}

inline Eigen::VectorXd admm_column(const Incidence& inc, const Eigen::VectorXd& r, double t, std::size_t k,
                                   ProxWorkspace& ws, const SolverOptions& opts) {
  const auto m = static_cast<Eigen::Index>(inc.edges());
  const auto nv = static_cast<Eigen::Index>(inc.vertices());
  Eigen::VectorXd& theta = ws.theta[k];
  Eigen::VectorXd& u = ws.dual[k];
  double& gamma = ws.gamma[k];
  const double tol = opts.admm_tol * std::sqrt(static_cast<double>(m));
  Eigen::VectorXd b(nv), hb(m), rhs(nv), diff(m), htd(nv), theta_old(m);
  ws.converged[k] = 0;
  ws.polished[k] = 0;
  int it = 0;
  for (; it < opts.admm_max; ++it) {
    diff = theta - u;
    inc.apply_transpose(diff.data(), htd.data());
    rhs = r + gamma * htd;
    b = inc.factor(gamma)->solve(rhs);
    inc.apply(b.data(), hb.data());
    theta_old = theta;
    const double thr = t / gamma;
    for (Eigen::Index l = 0; l < m; ++l) theta(l) = soft_threshold(hb(l) + u(l), thr);
    u += hb - theta;
    diff = theta - theta_old;
    inc.apply_transpose(diff.data(), htd.data());
    const double primal = (hb - theta).norm();
    const double dual = gamma * htd.norm();
    ws.primal_residual[k] = primal;
    ws.dual_residual[k] = dual;
    if (primal <= tol && dual <= tol) {
      ws.converged[k] = 1;
      ++it;
      break;
    }
    if (opts.adapt_gamma) {
      // Scaled duals u = y / gamma must be rescaled with gamma.
      if (primal > 10.0 * dual && gamma < 1e4) {
        gamma *= 2.0;
        u *= 0.5;
      } else if (dual > 10.0 * primal && gamma > 1e-4) {
        gamma *= 0.5;
        u *= 2.0;
      }
    }
  }
  ws.iterations[k] = it;
  if (opts.polish) {
    Eigen::VectorXd p = polish_column(inc, r, theta, t);
    if (prox_objective(inc, p, r, t) <= prox_objective(inc, b, r, t)) {
      b = std::move(p);
      ws.polished[k] = 1;
    }
  }
  return b;
}

}  // namespace detail

/// argmin_beta 0.5 |beta - r|^2 + t sum_k |H beta_k|_1, one ADMM solve per
/// column, warm-started from `ws`.
inline Coefficients fused_prox(const Coefficients& r, const Incidence& inc, double t, ProxWorkspace& ws,
                               const SolverOptions& opts = {}) {
  require(t >= 0.0, ErrorKind::invalid_argument, "prox parameter t must be >= 0");
  require(static_cast<std::size_t>(r.rows()) == inc.vertices(), ErrorKind::dimension,
          "prox input has " + std::to_string(r.rows()) + " rows, graph has " + std::to_string(inc.vertices()) +
              " vertices");
  const auto cols = static_cast<std::size_t>(r.cols());
  if (!opts.warm_start || !ws.matches(cols, inc.edges())) ws.reset(cols, inc.edges(), opts.gamma);
  Coefficients out(r.rows(), r.cols());
  if (t == 0.0) {
    for (std::size_t k = 0; k < cols; ++k) {
      const Eigen::VectorXd col = r.col(static_cast<Eigen::Index>(k));
      inc.apply(col.data(), ws.theta[k].data());
      ws.dual[k].setZero();
      ws.primal_residual[k] = ws.dual_residual[k] = 0.0;
      ws.iterations[k] = 0;
      ws.converged[k] = 1;
    }
    out = r;
    return out;
  }
  parallel_for(cols, resolve_threads(opts.threads), [&](std::size_t k) {
    const Eigen::VectorXd col = r.col(static_cast<Eigen::Index>(k));
    out.col(static_cast<Eigen::Index>(k)) = detail::admm_column(inc, col, t, k, ws, opts);
  });
  return out;
}

struct TraceRow {
  int iteration = 0;
  double objective = 0.0;
  double lipschitz = 0.0;
  double primal = 0.0;
  double dual = 0.0;
};

struct SolveResult {
  Coefficients beta;
  std::vector<TraceRow> trace;
  double objective = 0.0;
  double negll = 0.0;
  double fixed_point_residual = kInf;
  int iterations = 0;
  int refinements = 0;
  long admm_iterations = 0;  // summed over columns and prox calls
  int prox_calls = 0;
  bool converged = false;
  bool admm_cap_hit = false;
  std::vector<std::string> warnings;
};

inline double penalized_objective(const QuadratureScheme& q, const Incidence& inc, double lambda,
                                  const Coefficients& beta, double eta_max = kEtaMax) {
  return negll(q, beta, eta_max) + lambda * fused_penalty(inc, beta);
}

namespace detail {

// Minimizes Q over coefficients that are constant on the current fused groups
// of every column, with the signs of the cut differences held fixed. Inside
// that region Q is smooth and a damped Newton iteration applies; steps are
// shortened so no cut difference changes sign, and groups that meet are merged
// before the next round. Returns nothing when the group count exceeds
// `max_dim` or no decrease is found.
inline std::optional<Coefficients> refine_on_groups(const QuadratureScheme& q, const Incidence& inc, double lambda,
                                                    const Coefficients& x, double qx, const SolverOptions& opts,
                                                    std::size_t max_dim) {
  const auto m = static_cast<std::size_t>(x.rows());
  const auto cols = static_cast<std::size_t>(x.cols());
  const auto& edges = inc.edge_list();
  Coefficients cur = x;
  bool moved = false;

  for (int round = 0; round < 20; ++round) {
    std::vector<std::vector<int>> label(cols);
    std::vector<std::size_t> offset(cols + 1, 0);
    for (std::size_t k = 0; k < cols; ++k) {
      const Eigen::VectorXd b = cur.col(static_cast<Eigen::Index>(k));
      const double eps = 1e-9 * (b.maxCoeff() - b.minCoeff() + 1.0);
      std::vector<std::uint8_t> keep(edges.size());
      for (std::size_t l = 0; l < edges.size(); ++l) keep[l] = std::abs(b(edges[l].i) - b(edges[l].j)) < eps;
      label[k] = connected_components(m, edges, keep);
      offset[k + 1] = offset[k] + static_cast<std::size_t>(component_count(label[k]));
    }
    const auto dim = static_cast<Eigen::Index>(offset[cols]);
    if (static_cast<std::size_t>(dim) > max_dim) break;
    auto gid = [&](std::size_t k, std::size_t i) {
      return static_cast<Eigen::Index>(offset[k] + static_cast<std::size_t>(label[k][i]));
    };

    Eigen::VectorXd c = Eigen::VectorXd::Zero(dim);
    Eigen::VectorXd size = Eigen::VectorXd::Zero(dim);
    for (std::size_t k = 0; k < cols; ++k)
      for (std::size_t i = 0; i < m; ++i) {
        c(gid(k, i)) += cur(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
        size(gid(k, i)) += 1.0;
      }
    c.array() /= size.array();

    // Distinct adjacent group pairs (a, b) with c_a > c_b; the penalty is linear
    // in c while these orderings hold.
    std::vector<std::pair<Eigen::Index, Eigen::Index>> cut;
    Eigen::VectorXd pen = Eigen::VectorXd::Zero(dim);
    for (std::size_t k = 0; k < cols; ++k)
      for (const auto& e : edges) {
        Eigen::Index ga = gid(k, static_cast<std::size_t>(e.i));
        Eigen::Index gb = gid(k, static_cast<std::size_t>(e.j));
        if (ga == gb) continue;
        if (c(ga) < c(gb)) std::swap(ga, gb);
        pen(ga) += lambda;
        pen(gb) -= lambda;
        cut.emplace_back(ga, gb);
      }
    auto expand = [&](const Eigen::VectorXd& v) {
      Coefficients b(x.rows(), x.cols());
      for (std::size_t k = 0; k < cols; ++k)
        for (std::size_t i = 0; i < m; ++i) b(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v(gid(k, i));
      return b;
    };
    auto reduced = [&](const Eigen::VectorXd& v) { return negll(q, expand(v), opts.eta_max) + pen.dot(v); };

    double f = reduced(c);
    bool hit = false;
    for (int it = 0; it < 50 && !hit; ++it) {
      const Coefficients b = expand(c);
      const Eigen::VectorXd fac = gradient_factors(q, b, opts.eta_max);
      Eigen::VectorXd grad = pen;
      std::vector<Eigen::Triplet<double>> trip;
      trip.reserve(m * cols * cols + static_cast<std::size_t>(dim));
      std::vector<Eigen::Index> idx(cols);
      for (std::size_t i = 0; i < m; ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        const double e = std::clamp(q.design.row(r).dot(b.row(r)), -opts.eta_max, opts.eta_max);
        double w;
        if (q.kind == LikelihoodKind::poisson) {
          w = q.weights(r) * std::exp(e);
        } else {
          const double s = detail::sigmoid(e - std::log(q.baseline(r)));
          w = s * (1.0 - s);
        }
        w /= q.measure;
        for (std::size_t k = 0; k < cols; ++k) {
          idx[k] = gid(k, i);
          grad(idx[k]) += fac(r) * q.design(r, static_cast<Eigen::Index>(k));
        }
        for (std::size_t a = 0; a < cols; ++a)
          for (std::size_t bb = 0; bb < cols; ++bb)
            trip.emplace_back(idx[a], idx[bb],
                              w * q.design(r, static_cast<Eigen::Index>(a)) * q.design(r, static_cast<Eigen::Index>(bb)));
      }
      Eigen::SparseMatrix<double> hess(dim, dim);
      hess.setFromTriplets(trip.begin(), trip.end());
      double dmax = 0.0;
      for (Eigen::Index j = 0; j < dim; ++j) dmax = std::max(dmax, hess.coeff(j, j));
      for (Eigen::Index j = 0; j < dim; ++j) hess.coeffRef(j, j) += 1e-12 * (1.0 + dmax);
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(hess);
      if (ldlt.info() != Eigen::Success) break;
      const Eigen::VectorXd step = ldlt.solve(grad);
      const double dec = grad.dot(step);
      if (!std::isfinite(dec) || dec <= 0) break;

      double a = 1.0;
      for (const auto& [ga, gb] : cut) {
        const double closing = step(ga) - step(gb);  // c_a - c_b shrinks by a * closing
        if (closing > 0) a = std::min(a, (c(ga) - c(gb)) / closing);
      }
      const bool capped = a < 1.0;
      Eigen::VectorXd cn = c - a * step;
      double fn = reduced(cn);
      while (!(fn <= f - 1e-4 * a * dec) && a > 1e-12) {
        a *= 0.5;
        cn = c - a * step;
        fn = reduced(cn);
      }
      if (!(fn < f)) break;
      if (capped) {
        // Snap the pairs that met so the next round merges them.
        for (const auto& [ga, gb] : cut)
          if (cn(ga) - cn(gb) <= 1e-12 * (1.0 + std::abs(cn(ga)))) cn(gb) = cn(ga);
        fn = reduced(cn);
        hit = true;
      }
      const double change = f - fn;
      c = cn;
      f = fn;
      moved = true;
      if (dec < 1e-20 || change <= 1e-16 * std::max(1.0, std::abs(f))) break;
    }
    cur = expand(c);
    if (!hit) break;
  }
  if (!moved) return std::nullopt;
  const double qo = penalized_objective(q, inc, lambda, cur, opts.eta_max);
  if (!(qo <= qx)) return std::nullopt;
  return cur;
}

}  // namespace detail

/// Monotone proximal gradient (optionally accelerated) with a local Lipschitz
/// constant and backtracking. Stops once the relative objective change is
/// below `outer_tol` and a plain step from the current iterate moves it by at
/// most `fixed_point_tol`.
inline SolveResult prox_gradient_fit(const QuadratureScheme& q, const Incidence& inc, double lambda,
                                     const Coefficients& beta_init, const SolverOptions& opts,
                                     ProxWorkspace* workspace = nullptr) {
  opts.validate();
  require(lambda >= 0.0, ErrorKind::invalid_argument, "lambda must be >= 0");
  require(beta_init.rows() == q.design.rows() && beta_init.cols() == q.design.cols(), ErrorKind::dimension,
          "initial coefficients do not match the scheme");
  ProxWorkspace local;
  ProxWorkspace& ws = workspace ? *workspace : local;

  SolveResult res;
  Coefficients x = beta_init;
  double qx = penalized_objective(q, inc, lambda, x, opts.eta_max);
  require(std::isfinite(qx), ErrorKind::numerical, "initial objective is not finite");
  Coefficients x_prev = x;
  Coefficients y = x;
  double tk = 1.0;
  bool plain = !opts.accelerate;
  int last_refine = -1000;
  res.trace.push_back({0, qx, 0.0, 0.0, 0.0});

  for (int it = 1; it <= opts.max_outer; ++it) {
    const bool plain_step = plain || it == 1;
    if (plain_step) y = x;
    const double fy = negll(q, y, opts.eta_max);
    const Coefficients g = gradient(q, y, opts.eta_max);
    double l = lipschitz(q, y, opts.eta_max);
    Coefficients z;
    double fz = 0.0;
    for (int bt = 0;; ++bt) {
      z = fused_prox(y - g / l, inc, lambda / l, ws, opts);
      ++res.prox_calls;
      for (int c : ws.iterations) res.admm_iterations += c;
      fz = negll(q, z, opts.eta_max);
      const Coefficients d = z - y;
      const double bound = fy + (g.array() * d.array()).sum() + 0.5 * l * d.squaredNorm();
      if (fz <= bound + 1e-12 * std::max(1.0, std::abs(fy)) || bt >= 60) break;
      l *= 2.0;
    }
    for (auto c : ws.converged)
      if (!c) res.admm_cap_hit = true;
    const double qz = fz + lambda * fused_penalty(inc, z);
    require(std::isfinite(qz), ErrorKind::numerical, "objective became non-finite");

    const double step = plain_step ? (z - x).norm() : kInf;
    x_prev = x;
    const double q_old = qx;
    if (qz <= qx) {
      x = z;
      qx = qz;
    }
    res.trace.push_back({it, qx, l, ws.max_primal(), ws.max_dual()});
    res.iterations = it;

    if (opts.accelerate) {
      const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * tk * tk));
      if (qz <= q_old) {
        y = x + ((tk - 1.0) / tn) * (x - x_prev);
      } else {
        // Rejected step: MFISTA extrapolation toward z.
        y = x + (tk / tn) * (z - x);
      }
      tk = tn;
    }

    const double rel = std::abs(q_old - qx) / std::max(1.0, std::abs(q_old));
    if (opts.refine && rel <= opts.refine_trigger && it - last_refine >= 10) {
      last_refine = it;
      if (auto r = detail::refine_on_groups(q, inc, lambda, x, qx, opts, opts.refine_max_groups)) {
        const double qr = penalized_objective(q, inc, lambda, *r, opts.eta_max);
        if (qr < qx) {
          x_prev = x;
          x = std::move(*r);
          qx = qr;
          res.trace.back().objective = qx;
          ++res.refinements;
          tk = 1.0;
          plain = true;  // the next step doubles as the fixed-point check
          continue;
        }
      }
    }
    if (plain_step) {
      res.fixed_point_residual = step;
      if (rel <= opts.outer_tol && step <= opts.fixed_point_tol) {
        res.converged = true;
        break;
      }
      if (opts.accelerate && plain) {
        plain = false;  // resume momentum after a check step
        tk = 1.0;
      }
    } else if (rel <= opts.outer_tol) {
      plain = true;  // verify with a plain step next iteration
    }
    if (!plain_step && qz > q_old) tk = 1.0;
  }
  res.beta = std::move(x);
  res.objective = qx;
  res.negll = negll(q, res.beta, opts.eta_max);
  if (!res.converged) res.warnings.push_back("outer iteration cap reached");
  if (res.admm_cap_hit) res.warnings.push_back("ADMM iteration cap reached in at least one prox call");
  return res;
}

/// |beta - prox_{lambda/L}(beta - grad/L)| with L the local Lipschitz constant,
/// raised by backtracking exactly as in the solver.
inline double fixed_point_residual(const QuadratureScheme& q, const Incidence& inc, double lambda,
                                   const Coefficients& beta, const SolverOptions& opts,
                                   ProxWorkspace* workspace = nullptr) {
  ProxWorkspace local;
  ProxWorkspace& ws = workspace ? *workspace : local;
  const double f = negll(q, beta, opts.eta_max);
  const Coefficients g = gradient(q, beta, opts.eta_max);
  double l = lipschitz(q, beta, opts.eta_max);
  for (int bt = 0;; ++bt) {
    const Coefficients z = fused_prox(beta - g / l, inc, lambda / l, ws, opts);
    const Coefficients d = z - beta;
    const double bound = f + (g.array() * d.array()).sum() + 0.5 * l * d.squaredNorm();
    if (negll(q, z, opts.eta_max) <= bound + 1e-12 * std::max(1.0, std::abs(f)) || bt >= 60) return d.norm();
    l *= 2.0;
  }
}

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
  std::string s = "iteration,objective,L,primal_residual,dual_residual\n";
  for (const auto& r : trace)
    s += std::to_string(r.iteration) + "," + io::fmt(r.objective) + "," + io::fmt(r.lipschitz) + "," +
         io::fmt(r.primal) + "," + io::fmt(r.dual) + "\n";
  return s;
}

}  // namespace svci
