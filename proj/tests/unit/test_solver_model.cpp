#include <catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "helpers.hpp"

using namespace svci;
using Catch::Approx;

namespace {

Covariate ramp(int res) {
  Covariate c;
  c.name = "z";
  c.raster = Raster{Rect{0, 1, 0, 1}, res, res, {}};
  for (int j = 0; j < res; ++j)
    for (int i = 0; i < res; ++i) c.raster.values.push_back(std::sin(3.0 * i / res) + 0.5 * j / res);
  return c;
}

// Denser on the left half so the fitted surface is not flat.
PointPattern two_rate_pattern(std::uint64_t seed) {
  const Domain d = th::unit_square(10);
  const auto sub = d.subdivide(4);
  return simulate_poisson(
      d, sub, [](const Location& u) { return u.x < 0.5 ? std::log(150.0) : std::log(30.0); },
      [](std::size_t) { return std::log(150.0); }, seed);
}

Problem small_problem(bool covariate, LikelihoodKind kind = LikelihoodKind::poisson) {
  const Domain d = th::unit_square(10);
  std::vector<Covariate> covs;
  if (covariate) covs.push_back(ramp(10));
  GraphSpec g;
  g.k = 4;
  QuadratureSpec qs;
  qs.kind = kind;
  qs.nd = 64;
  qs.seed = 3;
  return make_problem(two_rate_pattern(12), d, CovariateField(covs), g, qs);
}

// Rand index by enumerating all pairs.
double rand_brute(const std::vector<int>& a, const std::vector<int>& b) {
  double agree = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) {
      agree += ((a[i] == a[j]) == (b[i] == b[j])) ? 1 : 0;
      total += 1;
    }
  return agree / total;
}

}  // namespace

TEST_CASE("fused MLE of an intercept-only Poisson model") {
  const auto prob = small_problem(false);
  const auto c = fused_mle(prob.scheme);
  CHECK(c(0) == Approx(std::log(double(prob.scheme.n) / prob.scheme.measure)).epsilon(1e-10));
}

TEST_CASE("lambda above lambda_max gives the constant fit") {
  const auto prob = small_problem(false);
  const double lm = lambda_max(prob.scheme, prob.inc);
  REQUIRE(lm > 0);
  const auto f = fit(prob, 1.05 * lm);
  const double expect = std::log(double(prob.scheme.n) / prob.scheme.measure);
  CHECK((f.beta.col(0).array() - expect).abs().maxCoeff() < 1e-4);
  CHECK(f.cluster_counts == std::vector<int>{1});
}

TEST_CASE("lambda_max separates fused from unfused fits") {
  for (auto kind : {LikelihoodKind::poisson, LikelihoodKind::logistic}) {
    const auto prob = small_problem(true, kind);
    const double lm = lambda_max(prob.scheme, prob.inc);
    const auto at = fit(prob, lm);
    CHECK(at.cluster_counts == std::vector<int>{1, 1});
    const auto below = fit(prob, 0.9 * lm);
    CHECK(below.df() > 2);
  }
}

TEST_CASE("objective trace is non-increasing and the fit is a fixed point") {
  const auto prob = small_problem(true);
  const double lm = lambda_max(prob.scheme, prob.inc);
  for (bool acc : {false, true}) {
    FitOptions o;
    o.solver.accelerate = acc;
    const auto f = fit(prob, 0.2 * lm, o);
    REQUIRE(f.trace.size() >= 2);
    for (std::size_t i = 1; i < f.trace.size(); ++i)
      CHECK(f.trace[i].objective <= f.trace[i - 1].objective + 1e-12 * std::abs(f.trace[i - 1].objective));
    CHECK(f.converged);
    CHECK(f.fixed_point_residual <= 1e-5);
    CHECK(fixed_point_residual(prob.scheme, prob.inc, 0.2 * lm, f.beta, o.solver) <= 1e-5);
    CHECK(f.objective == Approx(penalized_objective(prob.scheme, prob.inc, 0.2 * lm, f.beta)).epsilon(1e-12));
  }
}

TEST_CASE("accelerated and plain fits agree") {
  const auto prob = small_problem(true);
  const double lm = lambda_max(prob.scheme, prob.inc);
  FitOptions a, b;
  a.solver.accelerate = true;
  b.solver.accelerate = false;
  const auto fa = fit(prob, 0.3 * lm, a), fb = fit(prob, 0.3 * lm, b);
  CHECK(fa.objective == Approx(fb.objective).epsilon(1e-6));
}

TEST_CASE("without penalty observed rows reach log y") {
  std::mt19937_64 rng(50);
  auto q = th::random_scheme(LikelihoodKind::poisson, 12, 0, rng);
  for (Eigen::Index i = 0; i < 12; ++i) {
    q.observed[std::size_t(i)] = 1;
    q.responses(i) = 1.0 / q.weights(i);
  }
  q.n = 12;
  q.nd = 0;
  Incidence inc(th::chain(12));
  SolverOptions o;
  o.max_outer = 2000;
  const auto r = prox_gradient_fit(q, inc, 0.0, Coefficients::Zero(12, 1), o);
  for (Eigen::Index i = 0; i < 12; ++i) CHECK(r.beta(i, 0) == Approx(std::log(q.responses(i))).margin(1e-4));
}

TEST_CASE("fit rejects non-positive lambda") {
  const auto prob = small_problem(false);
  CHECK_THROWS_AS(fit(prob, 0.0), Error);
}

TEST_CASE("BIC counts fused groups") {
  const auto prob = small_problem(true);
  FitResult f;
  f.negll = 0.8;
  f.cluster_counts = {3, 1};
  const double n = double(prob.scheme.n);
  CHECK(bic(f, prob.scheme) == Approx(2.0 * prob.scheme.measure * 0.8 + 4.0 * std::log(n)));
}

TEST_CASE("lambda grid is log spaced") {
  const auto g = lambda_grid(2.0, 5, 1e-2);
  REQUIRE(g.size() == 5);
  CHECK(g.front() == 2.0);
  CHECK(g.back() == Approx(0.02));
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] / g[i - 1] == Approx(std::pow(1e-2, 0.25)));
  CHECK(lambda_grid(3.0, 1, 0.5) == std::vector<double>{3.0});
}

TEST_CASE("rand index examples") {
  const std::vector<int> a{1, 1, 2}, b{1, 2, 2};
  CHECK(rand_index(a, b) == Approx(1.0 / 3.0));
  CHECK(rand_index(a, a) == 1.0);
  // relabeling does not matter
  CHECK(rand_index(std::vector<int>{0, 0, 5, 5}, std::vector<int>{7, 7, 1, 1}) == 1.0);
  CHECK_THROWS_AS(rand_index(std::vector<int>{1}, std::vector<int>{1}), Error);
}

TEST_CASE("rand index matches pair enumeration") {
  std::mt19937_64 rng(51);
  for (int rep = 0; rep < 100; ++rep) {
    std::uniform_int_distribution<int> lab(0, 1 + rep % 5);
    std::vector<int> a(2 + std::size_t(rep % 30)), b(a.size());
    for (auto& x : a) x = lab(rng);
    for (auto& x : b) x = lab(rng);
    const double r = rand_index(a, b);
    CHECK(r == Approx(rand_brute(a, b)).epsilon(1e-12));
    CHECK(r == rand_index(b, a));
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
  }
}

TEST_CASE("MISE of a constant offset") {
  const auto grid = th::unit_square(10).subdivide(100);
  auto truth = [](const Location& u) { return Eigen::Vector3d(u.x, u.y, 1.0); };
  auto all = [&](const Location& u) { return Eigen::Vector3d(truth(u).array() + 0.5); };
  auto one = [&](const Location& u) { return Eigen::Vector3d(truth(u) + Eigen::Vector3d(0.5, 0, 0)); };
  CHECK(mise(truth, all, grid) == Approx(0.25));
  CHECK(mise(truth, one, grid) == Approx(0.25 / 3.0));
  CHECK(mise(truth, truth, grid) == 0.0);
}

TEST_CASE("prediction averages the K nearest quadrature points") {
  const auto prob = small_problem(true);
  const double lm = lambda_max(prob.scheme, prob.inc);
  const auto f = fit(prob, 0.2 * lm);
  Predictor pr(prob.domain, prob.scheme, f.beta);
  for (std::size_t i = 0; i < prob.scheme.size(); i += 7) {
    const auto b = pr.coefficients(prob.scheme.points[i], 1);
    // coincident observed/dummy points may tie; then the lower index wins
    std::size_t first = i;
    for (std::size_t j = 0; j < i; ++j)
      if (prob.scheme.points[j].x == prob.scheme.points[i].x && prob.scheme.points[j].y == prob.scheme.points[i].y) {
        first = j;
        break;
      }
    CHECK((b - f.beta.row(Eigen::Index(first)).transpose()).norm() < 1e-15);
  }
  const auto all = pr.coefficients({0.3, 0.3}, int(prob.scheme.size()));
  CHECK((all - f.beta.colwise().mean().transpose()).norm() < 1e-12);
  const auto p = pr.predict({0.3, 0.3}, 3);
  REQUIRE(p.rho.has_value());
  const double z = prob.scheme.field.at({0.3, 0.3})[0];
  CHECK(std::log(*p.rho) == Approx(p.beta(0) + z * p.beta(1)));
  CHECK_THROWS_AS(pr.coefficients({0.3, 0.3}, 0), Error);
}

TEST_CASE("cluster extraction on a chain") {
  Incidence inc(th::chain(5));
  Coefficients b(5, 2);
  b.col(0) << 0, 0, 1, 1, 1;
  b.col(1) << 2, 2, 2, 2, 2 + 1e-9;
  const auto l = extract_clusters(b, inc);
  CHECK(l[0] == std::vector<int>{0, 0, 1, 1, 1});
  CHECK(l[1] == std::vector<int>{0, 0, 0, 0, 0});
  CHECK(extract_clusters(b, inc, 1e-12)[1] == std::vector<int>{0, 0, 0, 0, 1});
}

TEST_CASE("single-value path equals a single fit") {
  const auto prob = small_problem(true);
  const double l = 0.5 * lambda_max(prob.scheme, prob.inc);
  PathOptions po;
  po.accelerate = false;
  const auto path = fit_path(prob, {l}, po);
  const auto single = fit(prob, l);
  REQUIRE(path.fits.size() == 1);
  CHECK(path.selected == 0);
  CHECK((path.fits[0].beta - single.beta).norm() == 0.0);
}

TEST_CASE("warm-started path is no worse than cold fits") {
  const auto prob = small_problem(true);
  PathOptions po;
  po.n_lambda = 5;
  po.min_ratio = 0.05;
  const auto warm = fit_path(prob, {}, po);
  REQUIRE(warm.fits.size() == 5);
  CHECK(warm.lambda_max > 0);
  for (std::size_t i = 1; i < warm.lambdas.size(); ++i) CHECK(warm.lambdas[i] < warm.lambdas[i - 1]);
  for (std::size_t i = 0; i < warm.fits.size(); ++i) {
    const auto cold = fit(prob, warm.lambdas[i]);
    CHECK(warm.fits[i].objective <= cold.objective + 1e-6);
    CHECK(warm.bic[i] == bic(warm.fits[i], prob.scheme));
  }
  for (double b : warm.bic) CHECK(b >= warm.bic[warm.selected]);

  const auto again = fit_path(prob, {}, po);
  CHECK(again.selected == warm.selected);
  CHECK(again.lambdas == warm.lambdas);
  for (std::size_t i = 0; i < warm.fits.size(); ++i) CHECK(again.fits[i].beta == warm.fits[i].beta);
}

TEST_CASE("fits do not depend on the thread count") {
  const auto prob = small_problem(true);
  const double l = 0.3 * lambda_max(prob.scheme, prob.inc);
  FitOptions one, four;
  one.solver.threads = 1;
  four.solver.threads = 4;
  CHECK(fit(prob, l, one).beta == fit(prob, l, four).beta);
}

TEST_CASE("BIC degrees of freedom at the extremes") {
  const auto prob = small_problem(false);
  const double lm = lambda_max(prob.scheme, prob.inc);
  CHECK(fit(prob, 2.0 * lm).df() == 1);
  // distinct values everywhere: every vertex is its own group
  Coefficients b(Eigen::Index(prob.scheme.size()), 2);
  for (Eigen::Index i = 0; i < b.rows(); ++i) b.row(i) << double(i), -2.0 * double(i);
  FitResult f;
  f.labels = extract_clusters(b, prob.inc);
  for (const auto& l : f.labels) f.cluster_counts.push_back(component_count(l));
  CHECK(f.df() == 2 * int(prob.scheme.size()));
}

TEST_CASE("cluster threshold examples") {
  Incidence inc(th::chain(6));
  Coefficients b(6, 1);
  b << 0, 0, 0, 1, 1, 1;
  CHECK(extract_clusters(b, inc, 0.1)[0] == std::vector<int>{0, 0, 0, 1, 1, 1});
  CHECK(extract_clusters(Coefficients::Constant(6, 1, 4.2), inc)[0] == std::vector<int>(6, 0));
  std::mt19937_64 rng(52);
  for (int rep = 0; rep < 20; ++rep) {
    const auto g = th::random_connected(15, 25, rng);
    Incidence gi(g);
    Coefficients r(15, 1);
    std::uniform_int_distribution<int> lev(0, 3);
    for (Eigen::Index i = 0; i < 15; ++i) r(i, 0) = 0.5 * lev(rng);
    const auto l = extract_clusters(r, gi);
    CHECK(extract_clusters(Coefficients(r.array() + 11.0), gi) == l);
    // labels agree with the components of the uncut edges
    std::vector<std::uint8_t> keep;
    for (const auto& e : gi.edge_list()) keep.push_back(r(e.i, 0) == r(e.j, 0));
    CHECK(l[0] == connected_components(15, gi.edge_list(), keep));
  }
}

TEST_CASE("constant coefficients predict the constant") {
  const auto prob = small_problem(true);
  const Coefficients b = constant_coefficients(prob.scheme.size(), Eigen::Vector2d(0.7, -1.1));
  Predictor pr(prob.domain, prob.scheme, b);
  for (int k : {1, 3, 17}) CHECK((pr.coefficients({0.41, 0.77}, k) - Eigen::Vector2d(0.7, -1.1)).norm() < 1e-12);
}

TEST_CASE("strong-signal fit with two covariates is finite") {
  const Domain d = th::unit_square(10);
  Covariate a = ramp(10), c = ramp(10);
  c.name = "w";
  for (auto& v : c.raster.values) v = std::cos(2.0 * v);
  GraphSpec g;
  QuadratureSpec qs;
  const auto prob = make_problem(two_rate_pattern(21), d, CovariateField({a, c}), g, qs);
  const auto f = fit(prob, 0.1 * lambda_max(prob.scheme, prob.inc));
  CHECK(f.beta.allFinite());
  for (int cnt : f.cluster_counts) CHECK(cnt >= 1);
  CHECK(f.labels.size() == 3);
}

TEST_CASE("MISE is stable under grid refinement") {
  const Domain d = th::unit_square(100);
  auto truth = [](const Location& u) { return Eigen::VectorXd::Constant(1, u.x < 0.5 ? 1.0 : 0.0); };
  auto est = [](const Location& u) { return Eigen::VectorXd::Constant(1, u.x < 0.437 || u.y > 0.813 ? 1.0 : 0.0); };
  const double coarse = mise(truth, est, d.subdivide(2500));
  const double fine = mise(truth, est, d.subdivide(10000));
  // exact integral: 0.063 * 0.813 + 0.5 * 0.187
  CHECK(fine == Approx(0.1447).epsilon(0.02));
  CHECK(std::abs(fine - coarse) < 0.05 * fine);
}

TEST_CASE("BIC minimum lies inside the grid", "[path]") {
  int interior = 0, df_drops = 0, pairs = 0;
  const int seeds = 20;
  for (int s = 1; s <= seeds; ++s) {
    ScenarioSpec sp;
    sp.id = "2a";
    sp.target_n = 800;
    sp.seed = std::uint64_t(s);
    const auto sc = make_scenario(sp);
    GraphSpec g;
    g.method = GraphMethod::network_chain;
    QuadratureSpec qs;
    qs.standardize = false;
    const auto prob = make_problem(sc.pattern, sc.domain, sc.model.field, g, qs);
    PathOptions po;
    po.n_lambda = 10;
    const auto path = fit_path(prob, {}, po);
    if (path.selected > 0 && path.selected + 1 < path.fits.size()) ++interior;
    for (std::size_t i = 1; i < path.fits.size(); ++i) {
      ++pairs;
      if (path.fits[i].df() < path.fits[i - 1].df()) ++df_drops;
    }
  }
  UNSCOPED_INFO("df decreased on " << df_drops << " of " << pairs << " consecutive path steps");
  CHECK(interior >= (8 * seeds + 9) / 10);
  CHECK(df_drops <= pairs / 10);
}
