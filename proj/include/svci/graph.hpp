#pragma once

// Connection graphs over quadrature points and their incidence operators.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <queue>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "svci/common.hpp"
#include "svci/geometry.hpp"
#include "svci/io.hpp"

namespace svci {

class UnionFind {
 public:
  explicit UnionFind(std::size_t n) : parent_(n), rank_(n, 0) {
    std::iota(parent_.begin(), parent_.end(), std::size_t{0});
  }

  std::size_t find(std::size_t x) {
    while (parent_[x] != x) {
      parent_[x] = parent_[parent_[x]];
      x = parent_[x];
    }
    return x;
  }

  bool unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    if (rank_[a] < rank_[b]) std::swap(a, b);
    parent_[b] = a;
    if (rank_[a] == rank_[b]) ++rank_[a];
    return true;
  }

 private:
  std::vector<std::size_t> parent_;
  std::vector<std::uint32_t> rank_;
};

struct Edge {
  std::int32_t i = 0;
  std::int32_t j = 0;
  double weight = 0.0;
};

enum class GraphMethod { knn, rnn, delaunay, mst, network_chain };

inline std::string to_string(GraphMethod m) {
  switch (m) {
    case GraphMethod::knn: return "knn";
    case GraphMethod::rnn: return "rnn";
    case GraphMethod::delaunay: return "delaunay";
    case GraphMethod::mst: return "mst";
    case GraphMethod::network_chain: return "network_chain";
  }
  return "unknown";
}

inline GraphMethod parse_graph_method(const std::string& s) {
  if (s == "knn") return GraphMethod::knn;
  if (s == "rnn") return GraphMethod::rnn;
  if (s == "delaunay" || s == "dt") return GraphMethod::delaunay;
  if (s == "mst") return GraphMethod::mst;
  if (s == "network_chain" || s == "chain") return GraphMethod::network_chain;
  throw Error(ErrorKind::config, "unknown graph method '" + s + "'");
}

struct GraphSpec {
  GraphMethod method = GraphMethod::knn;
  int k = 5;
  double radius = 0.0;
  double max_len = -1.0;          // delaunay pruning; < 0 selects the 95th percentile
  bool euclidean_metric = false;  // force Euclidean distances on networks
};

struct SpatialGraph {
  std::size_t vertices = 0;
  std::vector<Edge> edges;  // i < j, sorted, unique
  GraphSpec spec;
  std::size_t repair_edges = 0;
  std::vector<std::string> notes;

  std::string descriptor() const {
    std::string s = to_string(spec.method);
    if (spec.method == GraphMethod::knn || spec.method == GraphMethod::mst) s += "(k=" + std::to_string(spec.k) + ")";
    if (spec.method == GraphMethod::rnn) s += "(r=" + io::fmt(spec.radius) + ")";
    return s;
  }
};

inline constexpr double kMinEdgeWeight = 1e-12;

// Sorts, drops self-loops, merges duplicates keeping the smallest weight.
inline std::vector<Edge> canonical_edges(std::vector<Edge> edges) {
  for (auto& e : edges) {
    if (e.i > e.j) std::swap(e.i, e.j);
    e.weight = std::max(e.weight, kMinEdgeWeight);
  }
  std::erase_if(edges, [](const Edge& e) { return e.i == e.j; });
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.i, a.j, a.weight) < std::tie(b.i, b.j, b.weight);
  });
  edges.erase(std::unique(edges.begin(), edges.end(),
                          [](const Edge& a, const Edge& b) { return a.i == b.i && a.j == b.j; }),
              edges.end());
  return edges;
}

/// Labels are 0-based and order-canonical: the lowest-indexed vertex of each
/// component receives the smallest unused label.
inline std::vector<int> connected_components(std::size_t m, std::span<const Edge> edges,
                                             std::span<const std::uint8_t> active = {}) {
  UnionFind uf(m);
  for (std::size_t e = 0; e < edges.size(); ++e)
    if (active.empty() || active[e]) uf.unite(static_cast<std::size_t>(edges[e].i),
                                              static_cast<std::size_t>(edges[e].j));
  std::vector<int> label(m, -1);
  std::vector<int> root_label(m, -1);
  int next = 0;
  for (std::size_t v = 0; v < m; ++v) {
    const auto r = uf.find(v);
    if (root_label[r] < 0) root_label[r] = next++;
    label[v] = root_label[r];
  }
  return label;
}

inline int component_count(std::span<const int> labels) {
  int mx = -1;
  for (int l : labels) mx = std::max(mx, l);
  return mx + 1;
}

/// Kruskal's algorithm; ties broken by (i, j).
inline std::vector<Edge> minimum_spanning_forest(std::size_t m, std::vector<Edge> edges) {
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.weight, a.i, a.j) < std::tie(b.weight, b.i, b.j);
  });
  UnionFind uf(m);
  std::vector<Edge> out;
  for (const auto& e : edges)
    if (uf.unite(static_cast<std::size_t>(e.i), static_cast<std::size_t>(e.j))) out.push_back(e);
  return out;
}

// ---------------------------------------------------------------------------
// Delaunay triangulation (Bowyer-Watson).

namespace detail {

struct Triangle {
  std::array<std::int32_t, 3> v;
  double cx, cy, r2;
  bool alive;
};

inline bool circumcircle(const std::vector<Point2>& p, std::array<std::int32_t, 3> v, double& cx,
                         double& cy, double& r2) {
  const Point2 a = p[v[0]], b = p[v[1]], c = p[v[2]];
  const double d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
  if (d == 0.0) return false;
  const double a2 = a.x * a.x + a.y * a.y;
  const double b2 = b.x * b.x + b.y * b.y;
  const double c2 = c.x * c.x + c.y * c.y;
  cx = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
  cy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
  r2 = (a.x - cx) * (a.x - cx) + (a.y - cy) * (a.y - cy);
  return true;
}

}  // namespace detail

/// Delaunay edges of distinct, not-all-collinear points. Coordinates receive a
/// deterministic relative jitter of 1e-9 so lattice inputs are in general
/// position. Returns pairs of input indices.
inline std::vector<std::pair<std::int32_t, std::int32_t>> delaunay_edges(std::span<const Point2> input) {
  const auto n = static_cast<std::int32_t>(input.size());
  double xmin = kInf, xmax = -kInf, ymin = kInf, ymax = -kInf;
  for (const auto& q : input) {
    xmin = std::min(xmin, q.x);
    xmax = std::max(xmax, q.x);
    ymin = std::min(ymin, q.y);
    ymax = std::max(ymax, q.y);
  }
  const double span = std::max({xmax - xmin, ymax - ymin, 1e-300});
  std::vector<Point2> p(input.begin(), input.end());
  for (std::int32_t i = 0; i < n; ++i) {
    const auto h = mix_seed(static_cast<std::uint64_t>(i));
    const double jx = (static_cast<double>(h & 0xffffffu) / 16777216.0 - 0.5) * 1e-9 * span;
    const double jy = (static_cast<double>((h >> 24) & 0xffffffu) / 16777216.0 - 0.5) * 1e-9 * span;
    p[i].x += jx;
    p[i].y += jy;
  }
  const double midx = 0.5 * (xmin + xmax), midy = 0.5 * (ymin + ymax);
  const double big = 64.0 * span;
  p.push_back({midx - big, midy - big});
  p.push_back({midx + big, midy - big});
  p.push_back({midx, midy + big});

  std::vector<detail::Triangle> tris;
  auto add = [&](std::int32_t a, std::int32_t b, std::int32_t c) {
    detail::Triangle t{{a, b, c}, 0, 0, 0, true};
    if (!detail::circumcircle(p, t.v, t.cx, t.cy, t.r2)) return;
    tris.push_back(t);
  };
  add(n, n + 1, n + 2);

  // Insert in x-sorted order; keeps the cavity search cache-friendly.
  std::vector<std::int32_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return std::tie(p[a].x, a) < std::tie(p[b].x, b); });

  std::vector<std::pair<std::int32_t, std::int32_t>> boundary;
  std::vector<std::size_t> bad;
  std::size_t dead = 0;
  for (auto idx : order) {
    const Point2 q = p[idx];
    bad.clear();
    for (std::size_t t = 0; t < tris.size(); ++t) {
      const auto& tr = tris[t];
      if (!tr.alive) continue;
      const double dx = q.x - tr.cx, dy = q.y - tr.cy;
      if (dx * dx + dy * dy < tr.r2) bad.push_back(t);
    }
    boundary.clear();
    for (auto t : bad) {
      const auto& v = tris[t].v;
      for (int e = 0; e < 3; ++e) {
        auto a = v[e], b = v[(e + 1) % 3];
        boundary.emplace_back(std::min(a, b), std::max(a, b));
      }
      tris[t].alive = false;
      ++dead;
    }
    std::sort(boundary.begin(), boundary.end());
    for (std::size_t e = 0; e < boundary.size();) {
      std::size_t f = e + 1;
      while (f < boundary.size() && boundary[f] == boundary[e]) ++f;
      if (f - e == 1) add(boundary[e].first, boundary[e].second, idx);
      e = f;
    }
    if (dead > tris.size() / 2) {
      std::erase_if(tris, [](const detail::Triangle& t) { return !t.alive; });
      dead = 0;
    }
  }
  std::vector<std::pair<std::int32_t, std::int32_t>> edges;
  for (const auto& t : tris) {
    if (!t.alive) continue;
    for (int e = 0; e < 3; ++e) {
      auto a = t.v[e], b = t.v[(e + 1) % 3];
      if (a >= n || b >= n) continue;
      edges.emplace_back(std::min(a, b), std::max(a, b));
    }
  }
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Edge> knn_edges(const DistanceRows& rows, std::span<const Location> pts, int k) {
  const std::size_t m = pts.size();
  const auto kk = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(k), m - 1));
  std::vector<Edge> edges;
  edges.reserve(m * kk);
  std::vector<double> d;
  std::vector<std::int32_t> idx(m);
  for (std::size_t i = 0; i < m; ++i) {
    rows.row(pts[i], d);
    std::iota(idx.begin(), idx.end(), 0);
    auto less = [&](std::int32_t a, std::int32_t b) {
      const bool sa = static_cast<std::size_t>(a) == i, sb = static_cast<std::size_t>(b) == i;
      if (sa != sb) return sa;  // self first, then skipped
      return std::tie(d[a], a) < std::tie(d[b], b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk), idx.end(), less);
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(kk + 1), less);
    for (std::size_t r = 1; r <= kk; ++r)
      if (std::isfinite(d[idx[r]]))
        edges.push_back({static_cast<std::int32_t>(i), idx[r], d[idx[r]]});
  }
  return canonical_edges(std::move(edges));
}

inline bool is_connected(std::size_t m, std::span<const Edge> edges) {
  return component_count(connected_components(m, edges)) <= 1;
}

}  // namespace detail

/// Adds the minimum-distance inter-component edges (a spanning tree over the
/// components) until the graph is connected.
inline SpatialGraph ensure_connected(SpatialGraph g, std::span<const Location> pts, const Domain& domain) {
  const auto labels = connected_components(g.vertices, g.edges);
  const auto c = static_cast<std::size_t>(component_count(labels));
  if (c <= 1) return g;
  DistanceRows rows(domain, pts, g.spec.euclidean_metric);
  struct Best {
    double d = kInf;
    std::int32_t i = -1, j = -1;
  };
  std::vector<Best> best(c * c);
  std::vector<double> d;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    rows.row(pts[i], d);
    const auto ci = static_cast<std::size_t>(labels[i]);
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      const auto cj = static_cast<std::size_t>(labels[j]);
      if (ci == cj) continue;
      double dij = d[j];
      if (!std::isfinite(dij)) dij = 1e6 * (1.0 + euclidean(pts[i].point(), pts[j].point()));
      auto& b = best[std::min(ci, cj) * c + std::max(ci, cj)];
      if (dij < b.d) b = {dij, static_cast<std::int32_t>(i), static_cast<std::int32_t>(j)};
    }
  }
  std::vector<Edge> cand;
  std::vector<Edge> comp_edges;
  for (std::size_t a = 0; a < c; ++a)
    for (std::size_t b = a + 1; b < c; ++b) {
      const auto& e = best[a * c + b];
      if (e.i >= 0) comp_edges.push_back({static_cast<std::int32_t>(a), static_cast<std::int32_t>(b), e.d});
    }
  for (const auto& ce : minimum_spanning_forest(c, comp_edges)) {
    const auto& e = best[static_cast<std::size_t>(ce.i) * c + static_cast<std::size_t>(ce.j)];
    cand.push_back({e.i, e.j, e.d});
  }
  g.repair_edges += cand.size();
  g.notes.push_back("ensure_connected added " + std::to_string(cand.size()) + " edge(s) across " +
                    std::to_string(c) + " components");
  g.edges.insert(g.edges.end(), cand.begin(), cand.end());
  g.edges = canonical_edges(std::move(g.edges));
  return g;
}

inline std::vector<Edge> network_chain_edges(std::span<const Location> pts, const LinearNetwork& net) {
  const auto& segs = net.segments();
  std::vector<std::vector<std::int32_t>> on_seg(segs.size());
  for (std::size_t i = 0; i < pts.size(); ++i) {
    require(pts[i].on_network(), ErrorKind::invalid_argument, "network_chain needs network locations");
    on_seg[static_cast<std::size_t>(pts[i].segment)].push_back(static_cast<std::int32_t>(i));
  }
  std::vector<Edge> edges;
  for (auto& list : on_seg) {
    std::sort(list.begin(), list.end(), [&](auto a, auto b) {
      return std::tie(pts[a].offset, a) < std::tie(pts[b].offset, b);
    });
    for (std::size_t r = 1; r < list.size(); ++r)
      edges.push_back({list[r - 1], list[r], pts[list[r]].offset - pts[list[r - 1]].offset});
  }
  // Junctions: link the point nearest the shared vertex on every incident segment.
  for (std::size_t v = 0; v < net.vertices().size(); ++v) {
    std::vector<std::pair<std::int32_t, double>> ends;
    for (auto s : net.incident(v)) {
      const auto& list = on_seg[static_cast<std::size_t>(s)];
      if (list.empty()) continue;
      const auto& seg = segs[static_cast<std::size_t>(s)];
      if (seg.from == static_cast<std::int32_t>(v)) ends.emplace_back(list.front(), pts[list.front()].offset);
      if (seg.to == static_cast<std::int32_t>(v))
        ends.emplace_back(list.back(), seg.length - pts[list.back()].offset);
    }
    for (std::size_t a = 0; a < ends.size(); ++a)
      for (std::size_t b = a + 1; b < ends.size(); ++b)
        if (ends[a].first != ends[b].first)
          edges.push_back({ends[a].first, ends[b].first, ends[a].second + ends[b].second});
  }
  return canonical_edges(std::move(edges));
}

inline SpatialGraph build_graph(std::span<const Location> pts, const Domain& domain, const GraphSpec& spec) {
  require(pts.size() >= 2, ErrorKind::invalid_argument, "graph needs at least two points");
  SpatialGraph g;
  g.vertices = pts.size();
  g.spec = spec;
  DistanceRows rows(domain, pts, spec.euclidean_metric);
  switch (spec.method) {
    case GraphMethod::knn:
      require(spec.k >= 1, ErrorKind::invalid_argument, "knn needs k >= 1");
      g.edges = detail::knn_edges(rows, pts, spec.k);
      break;
    case GraphMethod::rnn: {
      require(spec.radius > 0, ErrorKind::invalid_argument, "rnn needs radius > 0");
      std::vector<double> d;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        rows.row(pts[i], d);
        for (std::size_t j = i + 1; j < pts.size(); ++j)
          if (d[j] <= spec.radius)
            g.edges.push_back({static_cast<std::int32_t>(i), static_cast<std::int32_t>(j), d[j]});
      }
      g.edges = canonical_edges(std::move(g.edges));
      break;
    }
    case GraphMethod::delaunay: {
      require(!domain.is_network(), ErrorKind::invalid_argument,
              "delaunay graphs are defined for planar domains only");
      // Coincident points are triangulated once and tied to their twin.
      std::vector<std::int32_t> order(pts.size());
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) {
        return std::tie(pts[a].x, pts[a].y, a) < std::tie(pts[b].x, pts[b].y, b);
      });
      std::vector<Point2> uniq;
      std::vector<std::int32_t> rep;
      for (std::size_t r = 0; r < order.size(); ++r) {
        const auto i = order[r];
        if (r > 0 && pts[i].x == pts[order[r - 1]].x && pts[i].y == pts[order[r - 1]].y) {
          g.edges.push_back({rep.back(), i, 0.0});
          continue;
        }
        rep.push_back(i);
        uniq.push_back(pts[i].point());
      }
      bool collinear = uniq.size() < 3;
      if (!collinear) {
        collinear = true;
        const Point2 a = uniq[0];
        std::size_t far = 1;
        for (std::size_t r = 1; r < uniq.size(); ++r)
          if (euclidean(a, uniq[r]) > euclidean(a, uniq[far])) far = r;
        const Point2 b = uniq[far];
        const double len = euclidean(a, b);
        for (const auto& q : uniq) {
          const double cross = (b.x - a.x) * (q.y - a.y) - (b.y - a.y) * (q.x - a.x);
          if (std::abs(cross) > 1e-10 * len * len) {
            collinear = false;
            break;
          }
        }
      }
      if (collinear) {
        g.notes.push_back("delaunay input is collinear; fell back to knn(k=" + std::to_string(spec.k) + ")");
        g.edges = detail::knn_edges(rows, pts, std::max(1, spec.k));
        break;
      }
      std::vector<Edge> tri;
      for (auto [a, b] : delaunay_edges(uniq)) {
        const auto i = rep[static_cast<std::size_t>(a)], j = rep[static_cast<std::size_t>(b)];
        tri.push_back({i, j, euclidean(pts[i].point(), pts[j].point())});
      }
      double cut = spec.max_len;
      if (cut <= 0 && !tri.empty()) {
        std::vector<double> w;
        for (const auto& e : tri) w.push_back(e.weight);
        const auto pos = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(w.size()))) - 1;
        std::nth_element(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(pos), w.end());
        cut = w[pos];
      }
      for (const auto& e : tri)
        if (e.weight <= cut) g.edges.push_back(e);
      g.spec.max_len = cut;
      g.edges = canonical_edges(std::move(g.edges));
      break;
    }
    case GraphMethod::mst: {
      int k = std::max(5, spec.k);
      auto base = detail::knn_edges(rows, pts, k);
      while (!detail::is_connected(pts.size(), base) && static_cast<std::size_t>(k) < pts.size() - 1) {
        k *= 2;
        base = detail::knn_edges(rows, pts, k);
      }
      g.spec.k = k;
      g.edges = canonical_edges(minimum_spanning_forest(pts.size(), std::move(base)));
      break;
    }
    case GraphMethod::network_chain:
      require(domain.is_network(), ErrorKind::invalid_argument, "network_chain needs a linear network");
      g.edges = network_chain_edges(pts, domain.network());
      break;
  }
  return ensure_connected(std::move(g), pts, domain);
}

inline std::string graph_csv(const SpatialGraph& g) {
  std::string s = "i,j,weight,method\n";
  const auto method = to_string(g.spec.method);
  for (const auto& e : g.edges)
    s += std::to_string(e.i) + "," + std::to_string(e.j) + "," + io::fmt(e.weight) + "," + method + "\n";
  return s;
}

// ---------------------------------------------------------------------------

using SparseMatrix = Eigen::SparseMatrix<double>;
using SparseFactor = Eigen::SimplicialLLT<SparseMatrix>;

/// Incidence operator H (m x M; row l has +1 at i and -1 at j for edge (i, j))
/// with a cache of factorizations of I + gamma * H^T H keyed by gamma.
/// Cached factors are immutable; concurrent solves against one factor are safe.
class Incidence {
 public:
  explicit Incidence(const SpatialGraph& g)
      : vertices_(g.vertices), edges_(g.edges), cache_(std::make_shared<Cache>()) {
    require(!edges_.empty(), ErrorKind::invalid_argument, "incidence needs at least one edge");
    degree_.assign(vertices_, 0.0);
    for (const auto& e : edges_) {
      degree_[static_cast<std::size_t>(e.i)] += 1.0;
      degree_[static_cast<std::size_t>(e.j)] += 1.0;
    }
  }

  std::size_t vertices() const { return vertices_; }
  std::size_t edges() const { return edges_.size(); }
  const std::vector<Edge>& edge_list() const { return edges_; }
  const std::vector<double>& degree() const { return degree_; }

  SparseMatrix matrix() const {
    std::vector<Eigen::Triplet<double>> t;
    for (std::size_t l = 0; l < edges_.size(); ++l) {
      t.emplace_back(static_cast<int>(l), edges_[l].i, 1.0);
      t.emplace_back(static_cast<int>(l), edges_[l].j, -1.0);
    }
    SparseMatrix h(static_cast<Eigen::Index>(edges_.size()), static_cast<Eigen::Index>(vertices_));
    h.setFromTriplets(t.begin(), t.end());
    return h;
  }

  SparseMatrix laplacian() const {
    std::vector<Eigen::Triplet<double>> t;
    for (std::size_t v = 0; v < vertices_; ++v) t.emplace_back(static_cast<int>(v), static_cast<int>(v), degree_[v]);
    for (const auto& e : edges_) {
      t.emplace_back(e.i, e.j, -1.0);
      t.emplace_back(e.j, e.i, -1.0);
    }
    SparseMatrix l(static_cast<Eigen::Index>(vertices_), static_cast<Eigen::Index>(vertices_));
    l.setFromTriplets(t.begin(), t.end());
    return l;
  }

  /// out = H x
  void apply(const double* x, double* out) const {
    for (std::size_t l = 0; l < edges_.size(); ++l) out[l] = x[edges_[l].i] - x[edges_[l].j];
  }

  /// out = H^T y
  void apply_transpose(const double* y, double* out) const {
    std::fill(out, out + vertices_, 0.0);
    for (std::size_t l = 0; l < edges_.size(); ++l) {
      out[edges_[l].i] += y[l];
      out[edges_[l].j] -= y[l];
    }
  }

  std::shared_ptr<const SparseFactor> factor(double gamma) const {
    require(gamma > 0.0, ErrorKind::invalid_argument, "gamma must be positive");
    std::lock_guard lock(cache_->mutex);
    if (auto it = cache_->factors.find(gamma); it != cache_->factors.end()) return it->second;
    SparseMatrix a = gamma * laplacian();
    for (Eigen::Index v = 0; v < a.rows(); ++v) a.coeffRef(v, v) += 1.0;
    auto f = std::make_shared<SparseFactor>();
    f->compute(a);
    require(f->info() == Eigen::Success, ErrorKind::numerical, "factorization of I + gamma L failed");
    cache_->factors.emplace(gamma, f);
    return f;
  }

  std::size_t cached_factors() const {
    std::lock_guard lock(cache_->mutex);
    return cache_->factors.size();
  }

 private:
  struct Cache {
    std::mutex mutex;
    std::map<double, std::shared_ptr<const SparseFactor>> factors;
  };

  std::size_t vertices_;
  std::vector<Edge> edges_;
  std::vector<double> degree_;
  std::shared_ptr<Cache> cache_;
};

inline Incidence incidence(const SpatialGraph& g) { return Incidence(g); }

// ---------------------------------------------------------------------------
// Minimum-congestion flow: the smallest c such that some edge flow f with
// |f_l| <= c satisfies H^T f = b. Used to locate the full-fusion penalty.

namespace detail {

class MaxFlow {
 public:
  explicit MaxFlow(std::size_t n) : head_(n, -1), level_(n), it_(n) {}

  void add_edge(std::size_t a, std::size_t b, double cap_ab, double cap_ba) {
    arcs_.push_back({b, head_[a], cap_ab});
    head_[a] = static_cast<std::ptrdiff_t>(arcs_.size()) - 1;
    arcs_.push_back({a, head_[b], cap_ba});
    head_[b] = static_cast<std::ptrdiff_t>(arcs_.size()) - 1;
  }

  double run(std::size_t s, std::size_t t, double eps) {
    double flow = 0.0;
    while (bfs(s, t, eps)) {
      for (std::size_t v = 0; v < head_.size(); ++v) it_[v] = head_[v];
      for (;;) {
        const double f = dfs(s, t, kInf, eps);
        if (f <= eps) break;
        flow += f;
      }
    }
    return flow;
  }

 private:
  struct Arc {
    std::size_t to;
    std::ptrdiff_t next;
    double cap;
  };

  bool bfs(std::size_t s, std::size_t t, double eps) {
    std::fill(level_.begin(), level_.end(), -1);
    std::queue<std::size_t> q;
    level_[s] = 0;
    q.push(s);
    while (!q.empty()) {
      const auto v = q.front();
      q.pop();
      for (auto a = head_[v]; a >= 0; a = arcs_[static_cast<std::size_t>(a)].next) {
        const auto& arc = arcs_[static_cast<std::size_t>(a)];
        if (arc.cap > eps && level_[arc.to] < 0) {
          level_[arc.to] = level_[v] + 1;
          q.push(arc.to);
        }
      }
    }
    return level_[t] >= 0;
  }

  double dfs(std::size_t v, std::size_t t, double pushed, double eps) {
    if (v == t) return pushed;
    for (auto& a = it_[v]; a >= 0; a = arcs_[static_cast<std::size_t>(a)].next) {
      auto& arc = arcs_[static_cast<std::size_t>(a)];
      if (arc.cap > eps && level_[arc.to] == level_[v] + 1) {
        const double f = dfs(arc.to, t, std::min(pushed, arc.cap), eps);
        if (f > eps) {
          arc.cap -= f;
          arcs_[static_cast<std::size_t>(a ^ 1)].cap += f;
          return f;
        }
      }
    }
    return 0.0;
  }

  std::vector<Arc> arcs_;
  std::vector<std::ptrdiff_t> head_;
  std::vector<int> level_;
  std::vector<std::ptrdiff_t> it_;
};

inline bool congestion_feasible(const Incidence& inc, std::span<const double> b, double c) {
  const std::size_t m = inc.vertices();
  MaxFlow mf(m + 2);
  const std::size_t s = m, t = m + 1;
  double demand = 0.0;
  for (std::size_t v = 0; v < m; ++v) {
    if (b[v] > 0) {
      mf.add_edge(s, v, b[v], 0.0);
      demand += b[v];
    } else if (b[v] < 0) {
      mf.add_edge(v, t, -b[v], 0.0);
    }
  }
  if (demand == 0.0) return true;
  // H^T f = b: flow f_l leaves i and enters j, so supply at i is b_i.
  for (const auto& e : inc.edge_list())
    mf.add_edge(static_cast<std::size_t>(e.i), static_cast<std::size_t>(e.j), c, c);
  const double eps = 1e-14 * demand;
  return mf.run(s, t, eps) >= demand * (1.0 - 1e-9);
}

}  // namespace detail

/// Bisection (relative tolerance `rel_tol`) between a necessary lower bound and
/// the least-squares feasible flow. `b` is projected to zero sum first.
inline double min_congestion(const Incidence& inc, std::vector<double> b, double rel_tol = 1e-2) {
  const std::size_t m = inc.vertices();
  require(b.size() == m, ErrorKind::dimension, "supply vector size mismatch");
  double mean = 0.0;
  for (double x : b) mean += x;
  mean /= static_cast<double>(m);
  double bmax = 0.0;
  for (auto& x : b) {
    x -= mean;
    bmax = std::max(bmax, std::abs(x));
  }
  if (bmax == 0.0) return 0.0;

  // Least-squares flow from the grounded Laplacian (vertex 0 pinned to 0).
  SparseMatrix lap = inc.laplacian();
  SparseMatrix grounded = lap.bottomRightCorner(lap.rows() - 1, lap.cols() - 1);
  Eigen::SimplicialLDLT<SparseMatrix> ldlt(grounded);
  require(ldlt.info() == Eigen::Success, ErrorKind::numerical, "grounded Laplacian is singular (graph disconnected?)");
  Eigen::VectorXd rhs = Eigen::Map<const Eigen::VectorXd>(b.data() + 1, static_cast<Eigen::Index>(m - 1));
  Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
  x.tail(static_cast<Eigen::Index>(m - 1)) = ldlt.solve(rhs);
  double hi = 0.0;
  for (const auto& e : inc.edge_list()) hi = std::max(hi, std::abs(x(e.i) - x(e.j)));
  double lo = 0.0;
  for (std::size_t v = 0; v < m; ++v) lo = std::max(lo, std::abs(b[v]) / inc.degree()[v]);
  hi *= 1.0 + 1e-9;
  if (!detail::congestion_feasible(inc, b, hi)) hi *= 1.0 + 1e-6;
  while (hi > lo * (1.0 + rel_tol)) {
    const double mid = std::sqrt(hi * std::max(lo, hi * 1e-12));
    if (detail::congestion_feasible(inc, b, mid)) hi = mid;
    else lo = mid;
  }
  return hi;
}

}  // namespace svci
