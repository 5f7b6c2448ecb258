#pragma once

// Synthetic experiments: Gaussian-process covariates, piecewise-constant
// coefficient surfaces and inhomogeneous Poisson patterns by thinning.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "svci/common.hpp"
#include "svci/data.hpp"
#include "svci/geometry.hpp"
#include "svci/io.hpp"
#include "svci/quadrature.hpp"

namespace svci {

/// One draw of a zero-mean Gaussian process with covariance
/// sigma2 * exp(-|u - v| / phi) at distinct locations.
inline std::vector<double> simulate_gp(std::span<const Point2> locs, double sigma2, double phi, std::uint64_t seed) {
  require(sigma2 > 0 && phi > 0, ErrorKind::invalid_argument, "GP needs sigma2 > 0 and phi > 0");
  const auto n = static_cast<Eigen::Index>(locs.size());
  if (n == 0) return {};
  Eigen::MatrixXd k(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    k(i, i) = sigma2;
    for (Eigen::Index j = 0; j < i; ++j) {
      const double d = euclidean(locs[static_cast<std::size_t>(i)], locs[static_cast<std::size_t>(j)]);
      require(d > 0.0, ErrorKind::invalid_argument, "GP locations must be distinct");
      k(i, j) = k(j, i) = sigma2 * std::exp(-d / phi);
    }
  }
  double jitter = 1e-10;
  Eigen::LLT<Eigen::MatrixXd> llt;
  for (int attempt = 0; attempt <= 3; ++attempt) {
    Eigen::MatrixXd kj = k;
    kj.diagonal().array() += jitter * sigma2;
    llt.compute(kj);
    if (llt.info() == Eigen::Success) break;
    require(attempt < 3, ErrorKind::numerical, "GP covariance factorization failed after jitter escalation");
    jitter *= 10.0;
  }
  Rng rng(derive_seed(seed, "gp"));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = normal(rng);
  const Eigen::VectorXd v = llt.matrixL() * z;
  return {v.data(), v.data() + n};
}

/// GP draw at the pixel centers of an nx x ny lattice.
inline Raster gp_raster(Rect bounds, int nx, int ny, double sigma2, double phi, std::uint64_t seed) {
  Raster r{bounds, nx, ny, {}};
  std::vector<Point2> c;
  c.reserve(static_cast<std::size_t>(nx) * ny);
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(nx) * ny; ++i) c.push_back(r.center(i));
  r.values = simulate_gp(c, sigma2, phi, seed);
  return r;
}

// ---------------------------------------------------------------------------

/// A region is a polygon (even-odd rings) or, with no rings, everything not
/// claimed by an earlier region.
struct Region {
  std::vector<Ring> rings;
  bool contains(Point2 p) const { return rings.empty() || point_in_rings(p, rings); }
};

/// Piecewise-constant coefficient surfaces sharing one region list; values[r][k]
/// is coefficient k on region r. The lowest-indexed containing region wins.
struct PiecewiseSurface {
  std::vector<std::string> names;  // coefficient names, intercept first
  std::vector<Region> regions;
  std::vector<std::vector<double>> values;

  std::size_t coefficients() const { return names.size(); }

  void validate() const {
    require(!regions.empty() && regions.size() == values.size(), ErrorKind::config,
            "surface needs one value row per region");
    for (const auto& v : values)
      require(v.size() == names.size(), ErrorKind::config, "surface value row has wrong length");
  }

  std::size_t region_of(const Location& u) const {
    const Point2 p = u.point();
    for (std::size_t r = 0; r < regions.size(); ++r)
      if (regions[r].contains(p)) return r;
    throw Error(ErrorKind::off_domain, "location not covered by any surface region");
  }

  Eigen::VectorXd value(const Location& u) const {
    const auto& v = values[region_of(u)];
    return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  }

  /// Truth cluster label of coefficient k: the index of its distinct value.
  int label(const Location& u, std::size_t k) const {
    std::vector<double> distinct;
    for (const auto& v : values) distinct.push_back(v[k]);
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    const double x = values[region_of(u)][k];
    return static_cast<int>(std::lower_bound(distinct.begin(), distinct.end(), x) - distinct.begin());
  }
};

inline Ring rect_ring(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

/// log rho(u) = shift + beta_0(u) + sum_k z_k(u) beta_k(u) with raw covariates.
struct IntensityModel {
  PiecewiseSurface surface;
  CovariateField field;  // raw rasters, no standardization
  double shift = 0.0;

  double log_rho(const Location& u) const {
    const auto& v = surface.values[surface.region_of(u)];
    double e = shift + v[0];
    for (std::size_t k = 0; k < field.size(); ++k) e += field.covariates()[k].raw(u) * v[k + 1];
    return e;
  }

  /// Upper bound of log rho over a rectangle, from per-covariate raster ranges
  /// and the largest value over all regions.
  double log_bound(const Rect& box) const {
    std::vector<std::pair<double, double>> range;
    for (const auto& c : field.covariates()) {
      require(c.source == Covariate::Source::raster, ErrorKind::invalid_argument,
              "simulation bounds need raster covariates");
      const auto& r = c.raster;
      const int ix0 = std::clamp(static_cast<int>(std::floor((box.xmin - r.bounds.xmin) / r.cell_width())), 0, r.nx - 1);
      const int ix1 = std::clamp(static_cast<int>(std::floor((box.xmax - r.bounds.xmin) / r.cell_width())), 0, r.nx - 1);
      const int iy0 = std::clamp(static_cast<int>(std::floor((box.ymin - r.bounds.ymin) / r.cell_height())), 0, r.ny - 1);
      const int iy1 = std::clamp(static_cast<int>(std::floor((box.ymax - r.bounds.ymin) / r.cell_height())), 0, r.ny - 1);
      double lo = kInf, hi = -kInf;
      for (int iy = iy0; iy <= iy1; ++iy)
        for (int ix = ix0; ix <= ix1; ++ix) {
          const double v = r.values[static_cast<std::size_t>(iy) * r.nx + ix];
          if (!std::isfinite(v)) continue;
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      require(lo <= hi, ErrorKind::numerical, "covariate raster has no data over a simulation cell");
      range.emplace_back(lo, hi);
    }
    double best = -kInf;
    for (const auto& v : surface.values) {
      double e = shift + v[0];
      for (std::size_t k = 0; k < range.size(); ++k) e += std::max(range[k].first * v[k + 1], range[k].second * v[k + 1]);
      best = std::max(best, e);
    }
    return best;
  }
};

inline Rect cell_box(const Domain& domain, const Subdivision& sub, std::size_t c) {
  if (!domain.is_network()) return sub.cell_rect(c);
  const auto [lo, hi] = sub.cell_range(c);
  const auto s = sub.cell_segment(c);
  const Point2 a = domain.network().at(s, lo).point();
  const Point2 b = domain.network().at(s, hi).point();
  return {std::min(a.x, b.x), std::max(a.x, b.x), std::min(a.y, b.y), std::max(a.y, b.y)};
}

/// Exact inhomogeneous Poisson simulation by thinning: per cell, a homogeneous
/// process at exp(log_bound(c)) is thinned with probability rho(u)/bound.
inline PointPattern simulate_poisson(const Domain& domain, const Subdivision& sub,
                                     const std::function<double(const Location&)>& log_rho,
                                     const std::function<double(std::size_t)>& log_bound, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "thinning"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PointPattern out;
  for (std::size_t c = 0; c < sub.size(); ++c) {
    const double lb = log_bound(c);
    if (lb == -kInf) continue;
    require(std::isfinite(lb), ErrorKind::numerical, "intensity bound is not finite");
    std::poisson_distribution<long> count(std::exp(lb) * sub.cells()[c].measure);
    const long k = count(rng);
    for (long j = 0; j < k; ++j) {
      const Location u = sample_in_cell(domain, sub, c, rng);
      const double lr = log_rho(u);
      require(lr <= lb + 1e-9, ErrorKind::numerical, "intensity exceeds its bound; thinning would be biased");
      if (unit(rng) < std::exp(lr - lb)) out.points.push_back(u);
    }
  }
  return out;
}

inline PointPattern simulate_poisson(const Domain& domain, const IntensityModel& model, std::uint64_t seed,
                                     std::size_t cells = 4096) {
  const auto sub = domain.subdivide(cells);
  return simulate_poisson(
      domain, sub, [&](const Location& u) { return model.log_rho(u); },
      [&](std::size_t c) { return model.log_bound(cell_box(domain, sub, c)); }, seed);
}

inline PointPattern simulate_homogeneous(const Domain& domain, double rate, std::uint64_t seed) {
  require(rate >= 0, ErrorKind::invalid_argument, "rate must be >= 0");
  const auto sub = domain.subdivide(64);
  const double lr = rate > 0 ? std::log(rate) : -kInf;
  return simulate_poisson(
      domain, sub, [&](const Location&) { return lr; }, [&](std::size_t) { return lr; }, seed);
}

/// Riemann approximation of the integral of rho over the domain.
inline double expected_count(const Domain& domain, const IntensityModel& model, std::size_t cells = 16384) {
  const auto sub = domain.subdivide(cells);
  double s = 0.0;
  for (const auto& c : sub.cells()) s += c.measure * std::exp(model.log_rho(c.center));
  return s;
}

// ---------------------------------------------------------------------------

struct ScenarioSpec {
  std::string id = "1";  // "1", "2a" or "2b"
  double R = 10.0;
  double target_n = 800.0;
  double sigma2 = 1.0;
  double phi = -1.0;      // < 0 selects 0.3 R
  int lattice = 32;       // GP lattice per side
  int resolution = 100;   // planar window pixels per side
  std::uint64_t seed = 1;
  std::optional<PiecewiseSurface> surface;  // default: preset for the scenario

  double effective_phi() const { return phi > 0 ? phi : 0.3 * R; }
  bool network() const { return id == "2a" || id == "2b"; }
  std::size_t covariates() const { return id == "2a" ? 0 : 2; }

  void validate() const {
    require(id == "1" || id == "2a" || id == "2b", ErrorKind::config, "scenario id must be 1, 2a or 2b");
    require(R > 0 && sigma2 > 0 && target_n > 0 && lattice >= 2 && resolution >= 1, ErrorKind::config,
            "scenario needs R, sigma2, target_n > 0");
  }
};

/// Three vertical bands in x crossed with two halves in y (six regions).
/// beta_1 changes across bands, beta_2 across halves, beta_0 across halves.
inline PiecewiseSurface three_band_planar(double R) {
  PiecewiseSurface s;
  s.names = {"intercept", "z1", "z2"};
  const double xs[4] = {-R, R / 3.0, 2.0 * R / 3.0, 2.0 * R};
  const double ys[3] = {-R, R / 2.0, 2.0 * R};
  const double b1[3] = {-1.0, 0.0, 1.0};
  const double b2[2] = {1.0, -1.0};
  const double b0[2] = {0.0, 0.5};
  for (int h = 0; h < 2; ++h)
    for (int b = 0; b < 3; ++b) {
      s.regions.push_back(Region{{rect_ring(xs[b], ys[h], xs[b + 1], ys[h + 1])}});
      s.values.push_back({b0[h], b1[b], b2[h]});
    }
  return s;
}

/// A quadrilateral district with raised intensity inside a network window.
inline PiecewiseSurface two_region_network(double R, std::size_t covariates) {
  PiecewiseSurface s;
  s.names = {"intercept"};
  if (covariates >= 1) s.names.push_back("z1");
  if (covariates >= 2) s.names.push_back("z2");
  Ring quad{{0.1 * R, 0.35 * R}, {0.65 * R, 0.2 * R}, {0.75 * R, 0.8 * R}, {0.2 * R, 0.7 * R}};
  s.regions.push_back(Region{{quad}});
  s.regions.push_back(Region{});
  std::vector<double> in{1.0}, out{0.0};
  if (covariates >= 1) {
    in.push_back(1.0);
    out.push_back(-1.0);
  }
  if (covariates >= 2) {
    in.push_back(-1.0);
    out.push_back(1.0);
  }
  s.values = {in, out};
  return s;
}

/// Street grid with unit blocks over [0, R]^2 and jittered junctions. The
/// geometry depends on R only, so replicates share one network.
inline LinearNetwork chicago_like_network(double R) {
  const int g = std::max(1, static_cast<int>(std::lround(R)));
  const double h = R / g;
  Rng rng(derive_seed(0x5eed, "street-grid"));
  std::uniform_real_distribution<double> jit(-0.15 * h, 0.15 * h);
  std::vector<Point2> v;
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) {
      const double jx = jit(rng), jy = jit(rng);
      const bool bx = i == 0 || i == g, by = j == 0 || j == g;
      v.push_back({i * h + (bx ? 0.0 : jx), j * h + (by ? 0.0 : jy)});
    }
  std::vector<std::pair<int, int>> e;
  auto id = [&](int i, int j) { return j * (g + 1) + i; };
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) {
      if (i < g) e.emplace_back(id(i, j), id(i + 1, j));
      if (j < g) e.emplace_back(id(i, j), id(i, j + 1));
    }
  return LinearNetwork(std::move(v), e);
}

struct Scenario {
  ScenarioSpec spec;
  Domain domain;
  IntensityModel model;
  PointPattern pattern;
  double expected_n = 0.0;

  /// Truth coefficient surface at u (intercept without the calibration shift).
  Eigen::VectorXd beta(const Location& u) const { return model.surface.value(u); }
};

/// Domain, covariates and truth for a spec, with beta_0 shifted so that the
/// expected count equals target_n; the pattern itself is simulated separately.
inline Scenario make_scenario_model(const ScenarioSpec& spec) {
  spec.validate();
  const double R = spec.R;
  Domain domain = spec.network() ? Domain(chicago_like_network(R))
                                 : Domain(PlanarWindow(Rect{0, R, 0, R}, spec.resolution, spec.resolution));
  std::vector<Covariate> covs;
  const Rect box = domain.bounding_box();
  for (std::size_t k = 0; k < spec.covariates(); ++k) {
    Covariate c;
    c.name = "z" + std::to_string(k + 1);
    c.source = Covariate::Source::raster;
    c.raster = gp_raster(box, spec.lattice, spec.lattice, spec.sigma2, spec.effective_phi(),
                         derive_seed(spec.seed, c.name));
    covs.push_back(std::move(c));
  }
  IntensityModel model;
  model.surface = spec.surface ? *spec.surface
                               : (spec.network() ? two_region_network(R, spec.covariates()) : three_band_planar(R));
  model.surface.validate();
  require(model.surface.coefficients() == spec.covariates() + 1, ErrorKind::config,
          "surface has " + std::to_string(model.surface.coefficients()) + " coefficients, scenario needs " +
              std::to_string(spec.covariates() + 1));
  model.field = CovariateField(std::move(covs));
  model.shift = 0.0;
  const double base = expected_count(domain, model);
  require(base > 0 && std::isfinite(base), ErrorKind::numerical, "scenario intensity integrates to zero");
  model.shift = std::log(spec.target_n / base);
  Scenario s{spec, std::move(domain), std::move(model), {}, 0.0};
  s.expected_n = expected_count(s.domain, s.model);
  return s;
}

inline Scenario make_scenario(const ScenarioSpec& spec) {
  Scenario s = make_scenario_model(spec);
  s.pattern = simulate_poisson(s.domain, s.model, derive_seed(spec.seed, "pattern"));
  return s;
}

// ---------------------------------------------------------------------------

inline PiecewiseSurface surface_from_json(const nlohmann::json& j) {
  PiecewiseSurface s;
  try {
    s.names = j.at("names").get<std::vector<std::string>>();
    for (const auto& r : j.at("regions")) {
      Region reg;
      if (r.contains("polygon") && !r.at("polygon").is_null()) {
        Ring ring;
        for (const auto& p : r.at("polygon")) ring.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
        reg.rings.push_back(std::move(ring));
      }
      s.regions.push_back(std::move(reg));
      s.values.push_back(r.at("values").get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("invalid surface JSON: ") + e.what());
  }
  s.validate();
  return s;
}

inline ScenarioSpec scenario_from_json(const nlohmann::json& j) {
  ScenarioSpec s;
  try {
    if (j.contains("scenario")) s.id = j.at("scenario").is_string() ? j.at("scenario").get<std::string>()
                                                                    : std::to_string(j.at("scenario").get<int>());
    s.R = j.value("R", s.R);
    s.target_n = j.value("target_n", s.target_n);
    s.sigma2 = j.value("sigma2", s.sigma2);
    s.phi = j.value("phi", s.phi);
    s.lattice = j.value("lattice", s.lattice);
    s.resolution = j.value("resolution", s.resolution);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("invalid scenario JSON: ") + e.what());
  }
  if (j.contains("surface")) s.surface = surface_from_json(j.at("surface"));
  s.validate();
  return s;
}

inline nlohmann::json scenario_json(const ScenarioSpec& s) {
  nlohmann::json j{{"scenario", s.id},       {"R", s.R},
                   {"target_n", s.target_n}, {"sigma2", s.sigma2},
                   {"phi", s.effective_phi()}, {"lattice", s.lattice},
                   {"resolution", s.resolution}, {"seed", s.seed}};
  if (s.surface) {
    nlohmann::json regs = nlohmann::json::array();
    for (std::size_t r = 0; r < s.surface->regions.size(); ++r) {
      nlohmann::json reg;
      const auto& rings = s.surface->regions[r].rings;
      if (rings.empty()) reg["polygon"] = nullptr;
      else {
        nlohmann::json poly = nlohmann::json::array();
        for (const auto& p : rings.front()) poly.push_back({p.x, p.y});
        reg["polygon"] = poly;
      }
      reg["values"] = s.surface->values[r];
      regs.push_back(reg);
    }
    j["surface"] = {{"names", s.surface->names}, {"regions", regs}};
  }
  return j;
}

/// Truth on an evaluation subdivision: location, cell measure, beta_<name>
/// (the intercept includes the calibration shift), label_<name>, the covariate
/// values z_<name> and log_rho.
inline std::string truth_csv(const Scenario& s, const Subdivision& grid) {
  const auto& names = s.model.surface.names;
  const auto cov = s.model.field.names();
  const bool net = s.domain.is_network();
  std::string out = net ? "x,y,segment,offset,measure" : "x,y,measure";
  for (const auto& n : names) out += ",beta_" + n;
  for (const auto& n : names) out += ",label_" + n;
  for (const auto& n : cov) out += ",z_" + n;
  out += ",log_rho\n";
  for (const auto& c : grid.cells()) {
    const auto& u = c.center;
    out += io::fmt(u.x) + "," + io::fmt(u.y);
    if (net) out += "," + std::to_string(u.segment) + "," + io::fmt(u.offset);
    out += "," + io::fmt(c.measure);
    auto b = s.model.surface.value(u);
    b(0) += s.model.shift;
    for (Eigen::Index k = 0; k < b.size(); ++k) out += "," + io::fmt(b(k));
    for (std::size_t k = 0; k < names.size(); ++k) out += "," + std::to_string(s.model.surface.label(u, k));
    for (double z : s.model.field.at(u)) out += "," + io::fmt(z);
    out += "," + io::fmt(s.model.log_rho(u)) + "\n";
  }
  return out;
}

}  // namespace svci
