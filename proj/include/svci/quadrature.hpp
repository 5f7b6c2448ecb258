#pragma once

// Quadrature schemes shared by the Poisson (Berman-Turner) and logistic
// composite likelihoods.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "svci/common.hpp"
#include "svci/data.hpp"
#include "svci/geometry.hpp"
#include "svci/io.hpp"

namespace svci {

enum class LikelihoodKind { poisson, logistic };
enum class DeltaMode { constant, plugin };

inline std::string to_string(LikelihoodKind k) { return k == LikelihoodKind::poisson ? "poisson" : "logistic"; }
inline std::string to_string(DeltaMode d) { return d == DeltaMode::constant ? "constant" : "plugin"; }

inline LikelihoodKind parse_likelihood(const std::string& s) {
  if (s == "poisson" || s == "pl") return LikelihoodKind::poisson;
  if (s == "logistic" || s == "lrl") return LikelihoodKind::logistic;
  throw Error(ErrorKind::config, "unknown likelihood kind '" + s + "'");
}

inline DeltaMode parse_delta_mode(const std::string& s) {
  if (s == "constant") return DeltaMode::constant;
  if (s == "plugin") return DeltaMode::plugin;
  throw Error(ErrorKind::config, "unknown delta mode '" + s + "'");
}

/// Observed points first (indices [0, n)), then dummy points.
struct QuadratureScheme {
  LikelihoodKind kind = LikelihoodKind::poisson;
  std::vector<Location> points;
  std::vector<std::uint8_t> observed;  // indicator per point
  Eigen::VectorXd weights;            // v_i (Poisson); zero for logistic
  Eigen::VectorXd responses;          // y_i = indicator / v_i (Poisson); indicator for logistic
  Eigen::VectorXd baseline;           // delta(u_i) (logistic); zero for Poisson
  Eigen::MatrixXd design;             // M x (p+1), intercept column first
  std::size_t n = 0;
  std::size_t nd = 0;
  double measure = 0.0;
  CovariateField field;  // covariates with the standardization used for `design`

  std::size_t size() const { return points.size(); }
  std::size_t columns() const { return static_cast<std::size_t>(design.cols()); }
};

/// Covariates at every point with a leading column of ones.
inline Eigen::MatrixXd design_matrix(std::span<const Location> points, const CovariateField& field) {
  const auto p = field.size();
  Eigen::MatrixXd z(static_cast<Eigen::Index>(points.size()), static_cast<Eigen::Index>(p + 1));
  std::vector<double> row(p);
  for (std::size_t i = 0; i < points.size(); ++i) {
    field.at(points[i], row);
    const auto r = static_cast<Eigen::Index>(i);
    z(r, 0) = 1.0;
    for (std::size_t k = 0; k < p; ++k) z(r, static_cast<Eigen::Index>(k + 1)) = row[k];
  }
  return z;
}

inline void finish_design(QuadratureScheme& q, CovariateField field, bool standardize) {
  if (standardize) field.standardize_over(q.points);
  q.design = design_matrix(q.points, field);
  q.field = std::move(field);
}

/// Berman-Turner scheme: one dummy at the center of each of ~nd_target cells,
/// weights v_i = a_i / n_i where n_i counts every point in the cell of u_i.
inline QuadratureScheme berman_turner(const PointPattern& pattern, const Domain& domain,
                                      std::size_t nd_target, CovariateField field,
                                      bool standardize = true) {
  require(nd_target >= 1, ErrorKind::invalid_argument, "nd_target must be >= 1");
  const auto sub = domain.subdivide(nd_target);
  QuadratureScheme q;
  q.kind = LikelihoodKind::poisson;
  q.n = pattern.size();
  q.nd = sub.size();
  q.measure = domain.measure();
  const std::size_t m = q.n + q.nd;
  q.points.reserve(m);
  std::vector<std::int64_t> cell(m);
  std::vector<std::size_t> count(sub.size(), 1);  // every cell holds its dummy
  for (std::size_t i = 0; i < q.n; ++i) {
    const auto& u = pattern.points[i];
    domain.check(u);
    const auto c = sub.locate(u);
    require(c >= 0, ErrorKind::off_domain, "observed point falls outside every quadrature cell");
    cell[i] = c;
    ++count[static_cast<std::size_t>(c)];
    q.points.push_back(u);
  }
  for (std::size_t c = 0; c < sub.size(); ++c) {
    cell[q.n + c] = static_cast<std::int64_t>(c);
    q.points.push_back(sub.cells()[c].center);
  }
  q.observed.assign(m, 0);
  std::fill(q.observed.begin(), q.observed.begin() + static_cast<std::ptrdiff_t>(q.n), 1);
  q.weights.resize(static_cast<Eigen::Index>(m));
  q.responses.resize(static_cast<Eigen::Index>(m));
  q.baseline = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    const auto c = static_cast<std::size_t>(cell[i]);
    const double v = sub.cells()[c].measure / static_cast<double>(count[c]);
    const auto r = static_cast<Eigen::Index>(i);
    q.weights(r) = v;
    q.responses(r) = q.observed[i] ? 1.0 / v : 0.0;
  }
  finish_design(q, std::move(field), standardize);
  return q;
}

/// Gaussian-kernel intensity pilot at cell centers under the domain metric,
/// normalized so that sum(value * cell measure) = n.
inline std::vector<double> pilot_intensity(const PointPattern& pattern, const Domain& domain,
                                           double bandwidth, const Subdivision& cells) {
  require(!pattern.empty(), ErrorKind::invalid_argument, "pilot intensity needs a non-empty pattern");
  require(bandwidth > 0.0, ErrorKind::invalid_argument, "bandwidth must be positive");
  std::vector<Location> centers;
  centers.reserve(cells.size());
  for (const auto& c : cells.cells()) centers.push_back(c.center);
  DistanceRows rows(domain, centers);
  std::vector<double> value(cells.size(), 0.0);
  std::vector<double> d;
  const double inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
  for (const auto& u : pattern.points) {
    rows.row(u, d);
    for (std::size_t c = 0; c < d.size(); ++c) value[c] += std::exp(-d[c] * d[c] * inv2h2);
  }
  double mass = 0.0;
  for (std::size_t c = 0; c < value.size(); ++c) mass += value[c] * cells.cells()[c].measure;
  // Every cell underflowed (bandwidth tiny relative to spacing): fall back to flat.
  if (!(mass > 0.0)) {
    std::fill(value.begin(), value.end(), 1.0);
    mass = cells.total_measure();
  }
  const double scale = static_cast<double>(pattern.size()) / mass;
  for (auto& v : value) v *= scale;
  return value;
}

inline double default_bandwidth(const Domain& domain) { return 0.1 * domain.bounding_box().diagonal(); }

/// Uniform location inside one subdivision cell.
inline Location sample_in_cell(const Domain& domain, const Subdivision& sub, std::size_t c, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (domain.is_network()) {
    const auto [lo, hi] = sub.cell_range(c);
    const auto s = sub.cell_segment(c);
    const double len = domain.network().segments()[static_cast<std::size_t>(s)].length;
    return domain.network().at(s, std::min(len, lo + unit(rng) * (hi - lo)));
  }
  const Rect r = sub.cell_rect(c);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    const Location u{r.xmin + unit(rng) * r.width(), r.ymin + unit(rng) * r.height(), -1, 0.0};
    if (domain.contains(u) && sub.locate(u) == static_cast<std::int64_t>(c)) return u;
  }
  return sub.cells()[c].center;
}

/// Logistic scheme: dummies from a Poisson process with piecewise-constant
/// intensity delta over a subdivision of ~nd_target cells, whose integral over
/// the domain is nd_target.
inline QuadratureScheme logistic_dummies(const PointPattern& pattern, const Domain& domain,
                                         std::size_t nd_target, CovariateField field,
                                         DeltaMode mode, std::uint64_t seed,
                                         double bandwidth = -1.0, bool standardize = true) {
  require(nd_target >= 1, ErrorKind::invalid_argument, "nd_target must be >= 1");
  const double measure = domain.measure();
  const auto sub = domain.subdivide(nd_target);
  std::vector<double> delta(sub.size(), static_cast<double>(nd_target) / measure);
  if (mode == DeltaMode::plugin) {
    const double h = bandwidth > 0.0 ? bandwidth : default_bandwidth(domain);
    auto pilot = pilot_intensity(pattern, domain, h, sub);
    const double floor = 1e-3 * static_cast<double>(nd_target) / measure;
    double mass = 0.0;
    for (std::size_t c = 0; c < sub.size(); ++c) {
      pilot[c] = std::max(pilot[c] * static_cast<double>(nd_target) / static_cast<double>(pattern.size()), floor);
      mass += pilot[c] * sub.cells()[c].measure;
    }
    for (std::size_t c = 0; c < sub.size(); ++c) delta[c] = pilot[c] * static_cast<double>(nd_target) / mass;
  }

  QuadratureScheme q;
  q.kind = LikelihoodKind::logistic;
  q.n = pattern.size();
  q.measure = measure;
  for (const auto& u : pattern.points) {
    domain.check(u);
    q.points.push_back(u);
  }

  Rng rng(derive_seed(seed, "logistic-dummies"));
  std::vector<Location> dummies;
  std::vector<std::size_t> dummy_cell;
  for (int attempt = 0; attempt < 2 && dummies.empty(); ++attempt) {
    for (std::size_t c = 0; c < sub.size(); ++c) {
      std::poisson_distribution<long> count(delta[c] * sub.cells()[c].measure);
      const long k = count(rng);
      for (long j = 0; j < k; ++j) {
        dummies.push_back(sample_in_cell(domain, sub, c, rng));
        dummy_cell.push_back(c);
      }
    }
  }
  require(!dummies.empty(), ErrorKind::numerical, "logistic scheme realized zero dummy points twice");
  q.nd = dummies.size();
  const std::size_t m = q.n + q.nd;
  q.points.insert(q.points.end(), dummies.begin(), dummies.end());
  q.observed.assign(m, 0);
  std::fill(q.observed.begin(), q.observed.begin() + static_cast<std::ptrdiff_t>(q.n), 1);
  q.weights = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  q.responses.resize(static_cast<Eigen::Index>(m));
  q.baseline.resize(static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) {
    std::size_t c;
    if (i < q.n) {
      const auto loc = sub.locate(q.points[i]);
      require(loc >= 0, ErrorKind::off_domain, "observed point falls outside every cell");
      c = static_cast<std::size_t>(loc);
    } else {
      c = dummy_cell[i - q.n];
    }
    q.baseline(static_cast<Eigen::Index>(i)) = delta[c];
    q.responses(static_cast<Eigen::Index>(i)) = q.observed[i];
  }
  finish_design(q, std::move(field), standardize);
  return q;
}

/// Audit export: location, indicator, weight, response, baseline, covariates.
inline std::string scheme_csv(const QuadratureScheme& q) {
  const bool net = !q.points.empty() && q.points.front().on_network();
  std::string s = net ? "x,y,segment,offset" : "x,y";
  s += ",delta_flag,weight,response,baseline";
  for (const auto& name : q.field.names()) s += "," + name;
  s += "\n";
  for (std::size_t i = 0; i < q.size(); ++i) {
    const auto& u = q.points[i];
    const auto r = static_cast<Eigen::Index>(i);
    s += io::fmt(u.x) + "," + io::fmt(u.y);
    if (net) s += "," + std::to_string(u.segment) + "," + io::fmt(u.offset);
    s += "," + std::to_string(static_cast<int>(q.observed[i])) + "," + io::fmt(q.weights(r)) + "," +
         io::fmt(q.responses(r)) + "," + io::fmt(q.baseline(r));
    for (Eigen::Index k = 1; k < q.design.cols(); ++k) s += "," + io::fmt(q.design(r, k));
    s += "\n";
  }
  return s;
}

}  // namespace svci
