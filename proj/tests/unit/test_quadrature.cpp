#include <catch_amalgamated.hpp>

#include <random>

#include "helpers.hpp"

using namespace svci;
using Catch::Approx;

namespace {

PointPattern uniform_points(const Domain& d, int n, std::uint64_t seed) {
  return simulate_homogeneous(d, n / d.measure(), seed);
}

}  // namespace

TEST_CASE("empty pattern gets one dummy per cell") {
  const auto q = berman_turner({}, th::unit_square(10), 4, {}, false);
  REQUIRE(q.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(q.weights(Eigen::Index(i)) == Approx(0.25));
    CHECK(q.responses(Eigen::Index(i)) == 0.0);
  }
}

TEST_CASE("observed point shares its cell weight with the dummy") {
  PointPattern p;
  p.points.push_back({0.2, 0.2});
  const auto q = berman_turner(p, th::unit_square(10), 4, {}, false);
  REQUIRE(q.size() == 5);
  CHECK(q.observed[0] == 1);
  CHECK(q.weights(0) == Approx(0.125));
  CHECK(q.responses(0) == Approx(8.0));
  const auto cell = std::find_if(q.points.begin() + 1, q.points.end(),
                                 [](const Location& u) { return u.x < 0.5 && u.y < 0.5; });
  CHECK(q.weights(Eigen::Index(cell - q.points.begin())) == Approx(0.125));
}

TEST_CASE("Berman-Turner weights sum to the measure") {
  std::mt19937_64 rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<std::uint8_t> mask(25 * 25);
    std::bernoulli_distribution on(0.7);
    for (auto& m : mask) m = on(rng);
    mask[0] = 1;
    const Domain w = PlanarWindow(Rect{0, 3, 0, 2}, 25, 25, mask);
    const Domain n = th::grid_network(1 + rep % 5);
    for (const Domain* d : {&w, &n}) {
      const auto p = uniform_points(*d, 20 + rep, std::uint64_t(rep));
      const auto q = berman_turner(p, *d, std::size_t(30 + 7 * rep), {}, false);
      CHECK(q.weights.sum() == Approx(d->measure()).epsilon(1e-9));
      for (std::size_t i = 0; i < q.size(); ++i) {
        CHECK(q.weights(Eigen::Index(i)) > 0.0);
        if (q.observed[i]) CHECK(q.responses(Eigen::Index(i)) == 1.0 / q.weights(Eigen::Index(i)));
        else CHECK(q.responses(Eigen::Index(i)) == 0.0);
      }
    }
  }
}

TEST_CASE("design rows match covariate evaluation") {
  Covariate c;
  c.name = "x";
  c.raster = Raster{Rect{0, 1, 0, 1}, 8, 8, {}};
  for (int i = 0; i < 64; ++i) c.raster.values.push_back(double(i % 8) - 0.1 * (i / 8));
  const Domain d = th::unit_square(8);
  const auto q = berman_turner(uniform_points(d, 30, 4), d, 64, CovariateField({c}), true);
  for (std::size_t i = 0; i < q.size(); ++i) {
    CHECK(q.design(Eigen::Index(i), 0) == 1.0);
    CHECK(q.design(Eigen::Index(i), 1) == covariate_at(q.field, q.points[i])[0]);
  }
}

TEST_CASE("logistic dummies with constant baseline") {
  const Domain d = th::unit_square(10);
  const auto p = uniform_points(d, 50, 2);
  const auto q = logistic_dummies(p, d, 100, {}, DeltaMode::constant, 17, -1.0, false);
  CHECK(q.n == p.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    CHECK(q.baseline(Eigen::Index(i)) == Approx(100.0));
    CHECK(q.observed[i] == (i < q.n ? 1 : 0));
  }
}

TEST_CASE("logistic dummy count has the requested mean") {
  const Domain d = th::unit_square(10);
  const auto p = uniform_points(d, 20, 3);
  double total = 0.0;
  const int reps = 400;
  for (int s = 0; s < reps; ++s)
    total += double(logistic_dummies(p, d, 100, {}, DeltaMode::constant, std::uint64_t(s), -1, false).nd);
  // sd of the mean = sqrt(100 / reps) = 0.5
  CHECK(std::abs(total / reps - 100.0) < 2.0);
}

TEST_CASE("plug-in baseline integrates to the dummy target") {
  const Domain d = th::unit_square(20);
  const auto p = uniform_points(d, 60, 8);
  const auto q = logistic_dummies(p, d, 80, {}, DeltaMode::plugin, 5, 0.2, false);
  CHECK(q.baseline.minCoeff() > 0.0);
  const auto sub = d.subdivide(400);
  const auto pilot = pilot_intensity(p, d, 0.2, sub);
  double mass = 0.0;
  for (std::size_t c = 0; c < sub.size(); ++c) mass += pilot[c] * sub.cells()[c].measure;
  CHECK(mass == Approx(double(p.size())).epsilon(1e-8));
}

TEST_CASE("pilot intensity shape") {
  const Domain d = th::unit_square(10);
  PointPattern one;
  one.points.push_back({0.05, 0.05});
  const auto sub = d.subdivide(100);
  const auto v = pilot_intensity(one, d, 0.1, sub);
  CHECK(v[std::size_t(sub.locate(one.points[0]))] > v[std::size_t(sub.locate({0.95, 0.95}))]);

  const auto flat = pilot_intensity(one, d, 1e6, sub);
  for (double x : flat) CHECK(x == Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(pilot_intensity({}, d, 0.1, sub), Error);
}

TEST_CASE("pilot intensity on a network uses path distance") {
  const Domain d = th::grid_network(2);
  PointPattern p;
  p.points.push_back(d.network().at(0, 0.5));
  const auto sub = d.subdivide(40);
  const auto v = pilot_intensity(p, d, 0.5, sub);
  double mass = 0.0;
  for (std::size_t c = 0; c < sub.size(); ++c) mass += v[c] * sub.cells()[c].measure;
  CHECK(mass == Approx(1.0).epsilon(1e-8));
}

TEST_CASE("scheme CSV lists every point") {
  const Domain d = th::unit_square(4);
  const auto q = berman_turner(uniform_points(d, 5, 1), d, 16, {}, false);
  const auto t = io::parse_csv(scheme_csv(q));
  CHECK(t.rows.size() == q.size());
  CHECK(t.column("weight") >= 0);
}
