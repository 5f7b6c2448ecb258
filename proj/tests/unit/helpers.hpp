#pragma once

#include <random>
#include <utility>
#include <vector>

#include "svci/svci.hpp"

namespace th {

inline svci::Domain unit_square(int res = 10) {
  return svci::PlanarWindow(svci::Rect{0, 1, 0, 1}, res, res);
}

inline svci::Domain single_segment(double len) {
  std::vector<std::pair<int, int>> e{{0, 1}};
  return svci::LinearNetwork({{0, 0}, {len, 0}}, e);
}

// 3x3 block grid, unit spacing.
inline svci::Domain grid_network(int g = 3) {
  std::vector<svci::Point2> v;
  std::vector<std::pair<int, int>> e;
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) v.push_back({double(i), double(j)});
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) {
      const int a = j * (g + 1) + i;
      if (i < g) e.emplace_back(a, a + 1);
      if (j < g) e.emplace_back(a, a + g + 1);
    }
  return svci::LinearNetwork(std::move(v), e);
}

inline svci::SpatialGraph graph_from(std::size_t m, const std::vector<std::pair<int, int>>& pairs) {
  svci::SpatialGraph g;
  g.vertices = m;
  for (auto [i, j] : pairs) g.edges.push_back({std::min(i, j), std::max(i, j), 1.0});
  g.edges = svci::canonical_edges(g.edges);
  return g;
}

inline svci::SpatialGraph chain(std::size_t m) {
  std::vector<std::pair<int, int>> p;
  for (std::size_t i = 0; i + 1 < m; ++i) p.emplace_back(int(i), int(i + 1));
  return graph_from(m, p);
}

// Random connected graph: a random spanning tree plus extra edges.
inline svci::SpatialGraph random_connected(std::size_t m, std::size_t max_edges, std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> p;
  for (std::size_t i = 1; i < m; ++i) {
    std::uniform_int_distribution<int> pick(0, int(i) - 1);
    p.emplace_back(pick(rng), int(i));
  }
  std::uniform_int_distribution<int> any(0, int(m) - 1);
  const std::size_t target = std::max(p.size(), std::min(max_edges, m * (m - 1) / 2));
  for (int tries = 0; p.size() < target && tries < 200; ++tries) {
    int a = any(rng), b = any(rng);
    if (a == b) continue;
    if (a > b) std::swap(a, b);
    bool dup = false;
    for (auto [x, y] : p) dup = dup || (std::min(x, y) == a && std::max(x, y) == b);
    if (!dup) p.emplace_back(a, b);
  }
  return graph_from(m, p);
}

// Small scheme with random observed/dummy layout and covariates.
inline svci::QuadratureScheme random_scheme(svci::LikelihoodKind kind, int m, int p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  svci::QuadratureScheme q;
  q.kind = kind;
  q.measure = 0.5 + 2.0 * u(rng);
  q.design.resize(m, p + 1);
  q.weights = Eigen::VectorXd::Zero(m);
  q.responses = Eigen::VectorXd::Zero(m);
  q.baseline = Eigen::VectorXd::Zero(m);
  for (int i = 0; i < m; ++i) {
    const bool obs = u(rng) < 0.4;
    q.points.push_back({u(rng), u(rng), -1, 0.0});
    q.observed.push_back(obs ? 1 : 0);
    q.design(i, 0) = 1.0;
    for (int k = 1; k <= p; ++k) q.design(i, k) = nrm(rng);
    q.weights(i) = kind == svci::LikelihoodKind::poisson ? q.measure / m * (0.5 + u(rng)) : 0.0;
    q.baseline(i) = kind == svci::LikelihoodKind::logistic ? 0.5 + 3.0 * u(rng) : 0.0;
    if (obs) {
      ++q.n;
      q.responses(i) = kind == svci::LikelihoodKind::poisson ? 1.0 / q.weights(i) : 1.0;
    } else {
      ++q.nd;
    }
  }
  return q;
}

}  // namespace th
