#pragma once

// Fitting orchestration: problem assembly, single fits, lambda paths with BIC
// selection, cluster extraction, prediction and evaluation metrics.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "svci/common.hpp"
#include "svci/data.hpp"
#include "svci/geometry.hpp"
#include "svci/graph.hpp"
#include "svci/io.hpp"
#include "svci/objective.hpp"
#include "svci/quadrature.hpp"
#include "svci/solver.hpp"

namespace svci {

struct QuadratureSpec {
  LikelihoodKind kind = LikelihoodKind::poisson;
  std::size_t nd = 0;  // 0 selects nd = n
  DeltaMode delta_mode = DeltaMode::constant;
  double bandwidth = -1.0;
  bool standardize = true;
  std::uint64_t seed = 0;
};

inline QuadratureScheme build_scheme(const PointPattern& pattern, const Domain& domain, CovariateField field,
                                     const QuadratureSpec& spec) {
  const std::size_t nd = spec.nd > 0 ? spec.nd : std::max<std::size_t>(pattern.size(), 1);
  if (spec.kind == LikelihoodKind::poisson) return berman_turner(pattern, domain, nd, std::move(field), spec.standardize);
  return logistic_dummies(pattern, domain, nd, std::move(field), spec.delta_mode, spec.seed, spec.bandwidth,
                          spec.standardize);
}

/// Scheme, graph and incidence for one data set; reusable across lambdas.
struct Problem {
  Domain domain;
  QuadratureScheme scheme;
  SpatialGraph graph;
  Incidence inc;
};

inline Problem make_problem(const PointPattern& pattern, const Domain& domain, CovariateField field,
                            const GraphSpec& graph_spec, const QuadratureSpec& quad_spec) {
  auto scheme = build_scheme(pattern, domain, std::move(field), quad_spec);
  auto graph = build_graph(scheme.points, domain, graph_spec);
  Incidence inc(graph);
  return Problem{domain, std::move(scheme), std::move(graph), std::move(inc)};
}

// ---------------------------------------------------------------------------

/// Constant-coefficient maximum likelihood (the fully fused solution), by
/// damped Newton on the p+1 shared coefficients.
inline Eigen::VectorXd fused_mle(const QuadratureScheme& q, double eta_max = kEtaMax) {
  require(q.n >= 1, ErrorKind::invalid_argument, "fused MLE needs at least one observed point");
  const auto m = q.design.rows();
  const auto p1 = q.design.cols();
  Eigen::VectorXd c = Eigen::VectorXd::Zero(p1);
  c(0) = std::log(static_cast<double>(q.n) / q.measure);
  auto expand = [&](const Eigen::VectorXd& v) { return Coefficients(Eigen::VectorXd::Ones(m) * v.transpose()); };
  double f = negll(q, expand(c), eta_max);
  for (int it = 0; it < 200; ++it) {
    const Eigen::VectorXd fac = gradient_factors(q, expand(c), eta_max);
    const Eigen::VectorXd g = q.design.transpose() * fac;
    Eigen::VectorXd w(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const double e = std::clamp(q.design.row(i).dot(c), -eta_max, eta_max);
      if (q.kind == LikelihoodKind::poisson) {
        w(i) = q.weights(i) * std::exp(e);
      } else {
        const double s = 1.0 / (1.0 + std::exp(-(e - std::log(q.baseline(i)))));
        w(i) = s * (1.0 - s);
      }
    }
    Eigen::MatrixXd h = q.design.transpose() * (w.asDiagonal() * q.design) / q.measure;
    h.diagonal().array() += 1e-14 * (1.0 + h.diagonal().maxCoeff());
    const Eigen::VectorXd step = h.ldlt().solve(g);
    double a = 1.0;
    Eigen::VectorXd cn = c - step;
    double fn = negll(q, expand(cn), eta_max);
    while (!(fn <= f + 1e-4 * a * (-g.dot(step))) && a > 1e-12) {
      a *= 0.5;
      cn = c - a * step;
      fn = negll(q, expand(cn), eta_max);
    }
    const double moved = (cn - c).norm();
    c = cn;
    const bool done = moved <= 1e-13 * (1.0 + c.norm()) || std::abs(f - fn) <= 1e-16 * std::max(1.0, std::abs(f));
    f = fn;
    if (done) break;
  }
  return c;
}

inline Coefficients constant_coefficients(std::size_t m, const Eigen::VectorXd& c) {
  return Eigen::VectorXd::Ones(static_cast<Eigen::Index>(m)) * c.transpose();
}

/// Smallest lambda whose solution is fully fused, to relative tolerance
/// `rel_tol` (the returned value is on the fused side). At the fused MLE the
/// optimality condition grad_k + lambda H^T s_k = 0 with |s| <= 1 is a flow
/// problem per column with supplies -grad_k and edge capacity lambda.
inline double lambda_max(const QuadratureScheme& q, const Incidence& inc, double rel_tol = 1e-2,
                         double eta_max = kEtaMax) {
  const auto c = fused_mle(q, eta_max);
  const Coefficients g = gradient(q, constant_coefficients(q.size(), c), eta_max);
  double lm = 0.0;
  for (Eigen::Index k = 0; k < g.cols(); ++k) {
    std::vector<double> b(static_cast<std::size_t>(g.rows()));
    for (Eigen::Index i = 0; i < g.rows(); ++i) b[static_cast<std::size_t>(i)] = -g(i, k);
    lm = std::max(lm, min_congestion(inc, std::move(b), rel_tol));
  }
  return lm;
}

// ---------------------------------------------------------------------------

inline double default_cluster_eps(const Eigen::VectorXd& b) {
  return 1e-6 * (b.maxCoeff() - b.minCoeff() + 1.0);
}

/// Edge j is cut for column k iff |H_j beta_k| >= eps; labels are the
/// components of the uncut edges. eps <= 0 selects the range-relative default.
inline std::vector<std::vector<int>> extract_clusters(const Coefficients& beta, const Incidence& inc,
                                                      double eps = -1.0) {
  std::vector<std::vector<int>> out;
  const auto& edges = inc.edge_list();
  for (Eigen::Index k = 0; k < beta.cols(); ++k) {
    const Eigen::VectorXd b = beta.col(k);
    const double e = eps > 0 ? eps : default_cluster_eps(b);
    std::vector<std::uint8_t> keep(edges.size());
    for (std::size_t l = 0; l < edges.size(); ++l) keep[l] = std::abs(b(edges[l].i) - b(edges[l].j)) < e;
    out.push_back(connected_components(inc.vertices(), edges, keep));
  }
  return out;
}

struct FitOptions {
  SolverOptions solver;
  double cluster_eps = -1.0;
  bool keep_trace = true;
};

struct FitResult {
  Coefficients beta;
  double lambda = 0.0;
  LikelihoodKind kind = LikelihoodKind::poisson;
  std::string graph;
  double objective = 0.0;
  double negll = 0.0;
  std::vector<std::vector<int>> labels;
  std::vector<int> cluster_counts;
  int iterations = 0;
  bool converged = false;
  double fixed_point_residual = kInf;
  std::vector<std::string> warnings;
  std::vector<TraceRow> trace;

  int df() const {
    int s = 0;
    for (int c : cluster_counts) s += c;
    return s;
  }
};

/// BIC = 2 |D| negll + df log(n), df = total number of fused groups.
inline double bic(const FitResult& fit, const QuadratureScheme& q) {
  const double n = std::max<double>(1.0, static_cast<double>(q.n));
  return 2.0 * q.measure * fit.negll + static_cast<double>(fit.df()) * std::log(n);
}

inline FitResult fit(const Problem& prob, double lambda, const FitOptions& opts = {},
                     const Coefficients* init = nullptr, ProxWorkspace* ws = nullptr) {
  require(lambda > 0.0, ErrorKind::invalid_argument, "lambda must be positive");
  const auto& q = prob.scheme;
  Coefficients start = init ? *init : constant_coefficients(q.size(), fused_mle(q, opts.solver.eta_max));
  auto sr = prox_gradient_fit(q, prob.inc, lambda, start, opts.solver, ws);
  FitResult r;
  r.beta = std::move(sr.beta);
  r.lambda = lambda;
  r.kind = q.kind;
  r.graph = prob.graph.descriptor();
  r.objective = sr.objective;
  r.negll = sr.negll;
  r.labels = extract_clusters(r.beta, prob.inc, opts.cluster_eps);
  for (const auto& l : r.labels) r.cluster_counts.push_back(component_count(l));
  r.iterations = sr.iterations;
  r.converged = sr.converged;
  r.fixed_point_residual = sr.fixed_point_residual;
  r.warnings = std::move(sr.warnings);
  if (opts.keep_trace) r.trace = std::move(sr.trace);
  return r;
}

inline FitResult fit(const PointPattern& pattern, const Domain& domain, CovariateField field,
                     const GraphSpec& graph_spec, const QuadratureSpec& quad_spec, double lambda,
                     const FitOptions& opts = {}) {
  const auto prob = make_problem(pattern, domain, std::move(field), graph_spec, quad_spec);
  return fit(prob, lambda, opts);
}

struct PathOptions {
  FitOptions fit;
  std::size_t n_lambda = 20;
  double min_ratio = 1e-3;
  bool accelerate = true;
  bool warm_start = true;
};

struct PathResult {
  std::vector<double> lambdas;  // strictly decreasing
  std::vector<FitResult> fits;
  std::vector<double> bic;
  std::size_t selected = 0;
  double lambda_max = 0.0;  // 0 when the grid was supplied

  const FitResult& best() const { return fits.at(selected); }
};

inline std::vector<double> lambda_grid(double lmax, std::size_t n, double min_ratio) {
  require(lmax > 0 && n >= 1 && min_ratio > 0 && min_ratio < 1, ErrorKind::invalid_argument, "invalid grid request");
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double f = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
    g[i] = lmax * std::pow(min_ratio, f);
  }
  return g;
}

/// Descending warm-started fits; the selected index minimizes BIC with ties
/// resolved toward the larger lambda. An empty grid requests the automatic
/// grid from lambda_max down to lambda_max * min_ratio.
inline PathResult fit_path(const Problem& prob, std::vector<double> grid, const PathOptions& opts = {}) {
  PathResult res;
  if (grid.empty()) {
    res.lambda_max = lambda_max(prob.scheme, prob.inc, 1e-2, opts.fit.solver.eta_max);
    require(res.lambda_max > 0, ErrorKind::numerical, "lambda_max is zero; data already fully fused");
    grid = lambda_grid(res.lambda_max, opts.n_lambda, opts.min_ratio);
  }
  std::sort(grid.begin(), grid.end(), std::greater<>());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  for (double l : grid) require(l > 0, ErrorKind::invalid_argument, "lambda grid must be positive");
  FitOptions fo = opts.fit;
  fo.solver.accelerate = opts.accelerate;
  ProxWorkspace ws;
  Coefficients prev;
  for (double l : grid) {
    const bool warm = opts.warm_start && prev.size() > 0;
    if (!warm) ws = ProxWorkspace{};
    auto f = fit(prob, l, fo, warm ? &prev : nullptr, &ws);
    prev = f.beta;
    res.bic.push_back(bic(f, prob.scheme));
    res.fits.push_back(std::move(f));
    res.lambdas.push_back(l);
  }
  for (std::size_t i = 1; i < res.bic.size(); ++i)
    if (res.bic[i] < res.bic[res.selected]) res.selected = i;
  return res;
}

// ---------------------------------------------------------------------------

struct Prediction {
  Eigen::VectorXd beta;
  std::optional<double> rho;
};

/// K-nearest quadrature point averaging of fitted coefficients under the
/// domain metric (ties by index).
class Predictor {
 public:
  Predictor(const Domain& domain, const QuadratureScheme& q, Coefficients beta, bool euclidean = false)
      : domain_(domain), q_(q), beta_(std::move(beta)), rows_(domain_, q_.points, euclidean) {
    require(beta_.rows() == static_cast<Eigen::Index>(q_.size()), ErrorKind::dimension,
            "coefficients do not match the quadrature points");
  }

  Eigen::VectorXd coefficients(const Location& u, int k = 1) const {
    require(k >= 1, ErrorKind::invalid_argument, "K must be >= 1");
    const auto m = q_.size();
    const auto kk = std::min<std::size_t>(static_cast<std::size_t>(k), m);
    std::vector<double> d;
    rows_.row(u, d);
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto less = [&](std::size_t a, std::size_t b) { return std::tie(d[a], a) < std::tie(d[b], b); };
    if (kk < m) std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk - 1), idx.end(), less);
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), less);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(beta_.cols());
    for (std::size_t r = 0; r < kk; ++r) b += beta_.row(static_cast<Eigen::Index>(idx[r])).transpose();
    return b / static_cast<double>(kk);
  }

  /// log rho(u) = (1, z(u)) . beta(u); nullopt when a covariate is unavailable.
  std::optional<double> log_intensity(const Location& u, const Eigen::VectorXd& b) const {
    try {
      const auto z = q_.field.at(u);
      double e = b(0);
      for (std::size_t k = 0; k < z.size(); ++k) e += z[k] * b(static_cast<Eigen::Index>(k + 1));
      return e;
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  Prediction predict(const Location& u, int k = 1) const {
    Prediction p;
    p.beta = coefficients(u, k);
    if (auto e = log_intensity(u, p.beta)) p.rho = std::exp(*e);
    return p;
  }

 private:
  const Domain& domain_;
  const QuadratureScheme& q_;
  Coefficients beta_;
  DistanceRows rows_;
};

/// (1 / (p_eff |D|)) sum_k sum_cells a (truth_k - est_k)^2 at cell centers.
/// Both callables map a Location to a vector of length p_eff.
template <class TrueFn, class EstFn>
double mise(const TrueFn& truth, const EstFn& est, const Subdivision& grid) {
  require(grid.size() > 0, ErrorKind::invalid_argument, "evaluation grid is empty");
  double s = 0.0;
  std::size_t p = 0;
  for (const auto& c : grid.cells()) {
    const auto a = truth(c.center);
    const auto b = est(c.center);
    require(a.size() == b.size() && a.size() > 0, ErrorKind::dimension, "surface dimension mismatch");
    p = static_cast<std::size_t>(a.size());
    double d2 = 0.0;
    for (std::size_t k = 0; k < p; ++k) {
      const double d = a[k] - b[k];
      d2 += d * d;
    }
    s += c.measure * d2;
  }
  return s / (static_cast<double>(p) * grid.total_measure());
}

/// Fraction of point pairs on which the two partitions agree about being
/// together or apart.
inline double rand_index(std::span<const int> a, std::span<const int> b) {
  require(a.size() == b.size(), ErrorKind::dimension, "label vectors differ in length");
  require(a.size() >= 2, ErrorKind::invalid_argument, "rand index needs at least two labels");
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
  }
  auto pairs = [](double x) { return 0.5 * x * (x - 1.0); };
  double both = 0.0, sa = 0.0, sb = 0.0;
  for (const auto& [k, v] : joint) both += pairs(v);
  for (const auto& [k, v] : ca) sa += pairs(v);
  for (const auto& [k, v] : cb) sb += pairs(v);
  const double total = pairs(static_cast<double>(a.size()));
  // agreements = total - (pairs together in exactly one partition)
  return (total - (sa - both) - (sb - both)) / total;
}

// ---------------------------------------------------------------------------
// Serialization.

inline std::vector<std::string> coefficient_names(const QuadratureScheme& q) {
  std::vector<std::string> names{"intercept"};
  for (auto& n : q.field.names()) names.push_back(n);
  return names;
}

inline nlohmann::json fit_summary_json(const FitResult& f, const QuadratureScheme& q) {
  nlohmann::json j;
  j["lambda"] = f.lambda;
  j["likelihood"] = to_string(f.kind);
  j["graph"] = f.graph;
  j["objective"] = f.objective;
  j["negll"] = f.negll;
  j["bic"] = bic(f, q);
  j["df"] = f.df();
  j["cluster_counts"] = f.cluster_counts;
  j["iterations"] = f.iterations;
  j["converged"] = f.converged;
  j["fixed_point_residual"] = std::isfinite(f.fixed_point_residual) ? nlohmann::json(f.fixed_point_residual)
                                                                      : nlohmann::json(nullptr);
  j["warnings"] = f.warnings;
  return j;
}

inline nlohmann::json fit_json(const FitResult& f, const QuadratureScheme& q) {
  nlohmann::json j = fit_summary_json(f, q);
  j["version"] = std::string(kVersion);
  j["n"] = q.n;
  j["nd"] = q.nd;
  j["M"] = q.size();
  j["measure"] = q.measure;
  j["coefficients"] = coefficient_names(q);
  j["standardization"] = {{"enabled", q.field.standardized()},
                          {"mean", q.field.means()},
                          {"sd", q.field.sds()}};
  nlohmann::json pts = nlohmann::json::array();
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto& u = q.points[i];
    nlohmann::json p;
    p["x"] = u.x;
    p["y"] = u.y;
    if (u.on_network()) {
      p["segment"] = u.segment;
      p["offset"] = u.offset;
    }
    p["observed"] = static_cast<int>(q.observed[i]);
    std::vector<double> b(static_cast<std::size_t>(f.beta.cols()));
    std::vector<int> lab(b.size());
    for (std::size_t k = 0; k < b.size(); ++k) {
      b[k] = f.beta(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
      lab[k] = f.labels.empty() ? 0 : f.labels[k][i];
    }
    p["beta"] = b;
    p["labels"] = lab;
    pts.push_back(std::move(p));
  }
  j["points"] = std::move(pts);
  return j;
}

/// One row per quadrature point: location, indicator, beta_<name>, cluster_<name>.
inline std::string coefficients_csv(const FitResult& f, const QuadratureScheme& q) {
  const auto names = coefficient_names(q);
  const bool net = !q.points.empty() && q.points.front().on_network();
  std::string s = net ? "x,y,segment,offset,observed" : "x,y,observed";
  for (const auto& n : names) s += ",beta_" + n;
  for (const auto& n : names) s += ",cluster_" + n;
  s += "\n";
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto& u = q.points[i];
    s += io::fmt(u.x) + "," + io::fmt(u.y);
    if (net) s += "," + std::to_string(u.segment) + "," + io::fmt(u.offset);
    s += "," + std::to_string(static_cast<int>(q.observed[i]));
    for (Eigen::Index k = 0; k < f.beta.cols(); ++k) s += "," + io::fmt(f.beta(static_cast<Eigen::Index>(i), k));
    for (std::size_t k = 0; k < names.size(); ++k)
      s += "," + std::to_string(f.labels.empty() ? 0 : f.labels[k][i]);
    s += "\n";
  }
  return s;
}

inline std::string bic_table_csv(const PathResult& p) {
  std::string s = "index,lambda,bic,df,negll,objective,iterations,converged,selected\n";
  for (std::size_t i = 0; i < p.fits.size(); ++i) {
    const auto& f = p.fits[i];
    s += std::to_string(i) + "," + io::fmt(p.lambdas[i]) + "," + io::fmt(p.bic[i]) + "," + std::to_string(f.df()) +
         "," + io::fmt(f.negll) + "," + io::fmt(f.objective) + "," + std::to_string(f.iterations) + "," +
         (f.converged ? "1" : "0") + "," + (i == p.selected ? "1" : "0") + "\n";
  }
  return s;
}

inline nlohmann::json path_json(const PathResult& p, const QuadratureScheme& q) {
  nlohmann::json j;
  j["version"] = std::string(kVersion);
  j["lambda_max"] = p.lambda_max;
  j["selected"] = p.selected;
  j["lambdas"] = p.lambdas;
  j["bic"] = p.bic;
  nlohmann::json fits = nlohmann::json::array();
  for (const auto& f : p.fits) fits.push_back(fit_summary_json(f, q));
  j["fits"] = std::move(fits);
  j["best"] = fit_json(p.best(), q);
  return j;
}

}  // namespace svci
