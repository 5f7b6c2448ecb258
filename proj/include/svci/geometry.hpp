#pragma once

// Observation domains: pixel-masked planar windows and linear networks.

#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "svci/common.hpp"

namespace svci {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline double euclidean(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

/// A location on either domain kind. Network locations carry (segment, offset)
/// and cache their embedded planar coordinates in (x, y).
struct Location {
  double x = 0.0;
  double y = 0.0;
  std::int32_t segment = -1;
  double offset = 0.0;

  bool on_network() const noexcept { return segment >= 0; }
  Point2 point() const noexcept { return {x, y}; }
  friend bool operator==(const Location&, const Location&) = default;
};

struct Rect {
  double xmin = 0.0;
  double xmax = 1.0;
  double ymin = 0.0;
  double ymax = 1.0;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  double diagonal() const { return std::hypot(width(), height()); }
};

using Ring = std::vector<Point2>;

/// Even-odd point-in-polygon over a set of rings (outer boundaries and holes).
inline bool point_in_rings(Point2 p, std::span<const Ring> rings) {
  bool inside = false;
  for (const auto& ring : rings) {
    const std::size_t n = ring.size();
    for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
      const Point2 a = ring[i];
      const Point2 b = ring[j];
      if ((a.y > p.y) != (b.y > p.y)) {
        const double xc = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
        if (p.x < xc) inside = !inside;
      }
    }
  }
  return inside;
}

// ---------------------------------------------------------------------------

class PlanarWindow {
 public:
  PlanarWindow(Rect bounds, int nx, int ny, std::vector<std::uint8_t> mask = {})
      : bounds_(bounds), nx_(nx), ny_(ny), mask_(std::move(mask)) {
    require(nx_ >= 1 && ny_ >= 1, ErrorKind::invalid_argument,
            "planar window needs nx, ny >= 1");
    require(bounds_.width() > 0 && bounds_.height() > 0, ErrorKind::invalid_argument,
            "planar window bounds must have positive extent");
    if (mask_.empty()) mask_.assign(static_cast<std::size_t>(nx_) * ny_, 1);
    require(mask_.size() == static_cast<std::size_t>(nx_) * ny_, ErrorKind::dimension,
            "mask size does not match nx*ny");
    for (auto& m : mask_) m = m ? 1 : 0;
    active_count_ = 0;
    for (auto m : mask_) active_count_ += m;
    require(active_count_ > 0, ErrorKind::invalid_argument,
            "planar window needs at least one active pixel");
  }

  /// Rasterizes polygon rings onto the grid: a pixel is active iff its center
  /// lies inside (even-odd rule).
  static PlanarWindow from_polygon(Rect bounds, int nx, int ny, std::span<const Ring> rings) {
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(nx) * ny, 0);
    const double pw = bounds.width() / nx;
    const double ph = bounds.height() / ny;
    for (int iy = 0; iy < ny; ++iy)
      for (int ix = 0; ix < nx; ++ix) {
        const Point2 c{bounds.xmin + (ix + 0.5) * pw, bounds.ymin + (iy + 0.5) * ph};
        mask[static_cast<std::size_t>(iy) * nx + ix] = point_in_rings(c, rings) ? 1 : 0;
      }
    return PlanarWindow(bounds, nx, ny, std::move(mask));
  }

  const Rect& bounds() const { return bounds_; }
  int nx() const { return nx_; }
  int ny() const { return ny_; }
  double pixel_width() const { return bounds_.width() / nx_; }
  double pixel_height() const { return bounds_.height() / ny_; }
  double pixel_area() const { return pixel_width() * pixel_height(); }
  std::size_t active_count() const { return active_count_; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }

  bool active(int ix, int iy) const {
    return mask_[static_cast<std::size_t>(iy) * nx_ + ix] != 0;
  }

  /// Linear pixel index (ix + nx*iy) of the pixel containing (x, y), or -1 when
  /// outside the bounding rectangle. The upper edges belong to the last pixel.
  std::int64_t pixel_of(double x, double y) const {
    if (!(x >= bounds_.xmin && x <= bounds_.xmax && y >= bounds_.ymin && y <= bounds_.ymax))
      return -1;
    int ix = static_cast<int>(std::floor((x - bounds_.xmin) / pixel_width()));
    int iy = static_cast<int>(std::floor((y - bounds_.ymin) / pixel_height()));
    ix = std::clamp(ix, 0, nx_ - 1);
    iy = std::clamp(iy, 0, ny_ - 1);
    return static_cast<std::int64_t>(iy) * nx_ + ix;
  }

  bool contains(double x, double y) const {
    const auto idx = pixel_of(x, y);
    return idx >= 0 && mask_[static_cast<std::size_t>(idx)] != 0;
  }

  Point2 pixel_center(std::int64_t idx) const {
    const auto ix = static_cast<int>(idx % nx_);
    const auto iy = static_cast<int>(idx / nx_);
    return {bounds_.xmin + (ix + 0.5) * pixel_width(), bounds_.ymin + (iy + 0.5) * pixel_height()};
  }

  double measure() const { return static_cast<double>(active_count_) * pixel_area(); }

 private:
  Rect bounds_;
  int nx_;
  int ny_;
  std::vector<std::uint8_t> mask_;
  std::size_t active_count_ = 0;
};

// ---------------------------------------------------------------------------

struct Segment {
  std::int32_t from = 0;
  std::int32_t to = 0;
  double length = 0.0;
};

class LinearNetwork {
 public:
  LinearNetwork(std::vector<Point2> vertices, std::span<const std::pair<int, int>> segments)
      : vertices_(std::move(vertices)), incident_(vertices_.size()) {
    require(!segments.empty(), ErrorKind::invalid_argument, "network needs at least one segment");
    segments_.reserve(segments.size());
    for (const auto& [a, b] : segments) {
      require(a >= 0 && b >= 0 && static_cast<std::size_t>(a) < vertices_.size() &&
                  static_cast<std::size_t>(b) < vertices_.size(),
              ErrorKind::invalid_argument, "segment references an unknown vertex");
      const double len = euclidean(vertices_[a], vertices_[b]);
      require(len > 0.0, ErrorKind::invalid_argument,
              "segment " + std::to_string(segments_.size()) + " has zero length");
      incident_[a].push_back(static_cast<std::int32_t>(segments_.size()));
      incident_[b].push_back(static_cast<std::int32_t>(segments_.size()));
      segments_.push_back({a, b, len});
      total_length_ += len;
    }
  }

  const std::vector<Point2>& vertices() const { return vertices_; }
  const std::vector<Segment>& segments() const { return segments_; }
  const std::vector<std::int32_t>& incident(std::size_t v) const { return incident_[v]; }
  double measure() const { return total_length_; }

  Rect bounding_box() const {
    Rect r{kInf, -kInf, kInf, -kInf};
    for (const auto& p : vertices_) {
      r.xmin = std::min(r.xmin, p.x);
      r.xmax = std::max(r.xmax, p.x);
      r.ymin = std::min(r.ymin, p.y);
      r.ymax = std::max(r.ymax, p.y);
    }
    return r;
  }

  Location at(std::int32_t segment, double offset) const {
    require(segment >= 0 && static_cast<std::size_t>(segment) < segments_.size(),
            ErrorKind::off_domain, "segment id out of range");
    const auto& s = segments_[segment];
    require(offset >= 0.0 && offset <= s.length, ErrorKind::off_domain,
            "offset outside segment length");
    const double t = offset / s.length;
    const Point2 a = vertices_[s.from];
    const Point2 b = vertices_[s.to];
    return {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), segment, offset};
  }

  bool contains(const Location& u) const {
    return u.segment >= 0 && static_cast<std::size_t>(u.segment) < segments_.size() &&
           u.offset >= 0.0 && u.offset <= segments_[u.segment].length;
  }

  struct Projection {
    Location location;
    double distance = kInf;
  };

  /// Orthogonal projection onto the nearest segment (lowest segment id on ties).
  Projection project(Point2 p) const {
    Projection best;
    for (std::size_t s = 0; s < segments_.size(); ++s) {
      const Point2 a = vertices_[segments_[s].from];
      const Point2 b = vertices_[segments_[s].to];
      const double dx = b.x - a.x;
      const double dy = b.y - a.y;
      double t = ((p.x - a.x) * dx + (p.y - a.y) * dy) / (dx * dx + dy * dy);
      t = std::clamp(t, 0.0, 1.0);
      const Point2 q{a.x + t * dx, a.y + t * dy};
      const double d = euclidean(p, q);
      if (d < best.distance) {
        best.distance = d;
        best.location = {q.x, q.y, static_cast<std::int32_t>(s), t * segments_[s].length};
      }
    }
    return best;
  }

  /// Shortest-path distances from `src` to every vertex (Dijkstra). The query
  /// location is spliced in as a temporary source attached to both endpoints
  /// of its segment.
  std::vector<double> vertex_distances(const Location& src) const {
    std::vector<double> dist(vertices_.size(), kInf);
    using Item = std::pair<double, std::int32_t>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    const auto& s = segments_[src.segment];
    auto relax = [&](std::int32_t v, double d) {
      if (d < dist[v]) {
        dist[v] = d;
        heap.emplace(d, v);
      }
    };
    relax(s.from, src.offset);
    relax(s.to, s.length - src.offset);
    while (!heap.empty()) {
      const auto [d, v] = heap.top();
      heap.pop();
      if (d > dist[v]) continue;
      for (auto e : incident_[v]) {
        const auto& seg = segments_[e];
        const auto w = seg.from == v ? seg.to : seg.from;
        relax(w, d + seg.length);
      }
    }
    return dist;
  }

  /// Distance from the source used to build `vdist` to `dst`.
  double distance_from(std::span<const double> vdist, const Location& src,
                       const Location& dst) const {
    const auto& s = segments_[dst.segment];
    double d = std::min(vdist[s.from] + dst.offset, vdist[s.to] + (s.length - dst.offset));
    if (dst.segment == src.segment) d = std::min(d, std::abs(dst.offset - src.offset));
    return d;
  }

  double distance(const Location& a, const Location& b) const {
    if (a.segment == b.segment && a.offset == b.offset) return 0.0;
    const auto vd = vertex_distances(a);
    return distance_from(vd, a, b);
  }

 private:
  std::vector<Point2> vertices_;
  std::vector<Segment> segments_;
  std::vector<std::vector<std::int32_t>> incident_;
  double total_length_ = 0.0;
};

// ---------------------------------------------------------------------------

struct Cell {
  Location center;
  double measure = 0.0;
};

/// A partition of the domain into disjoint cells whose measures sum to |D|.
class Subdivision {
 public:
  const std::vector<Cell>& cells() const { return cells_; }
  std::size_t size() const { return cells_.size(); }
  double total_measure() const {
    double s = 0.0;
    for (const auto& c : cells_) s += c.measure;
    return s;
  }

  /// Cell id containing `u`; -1 if `u` is off the subdivided domain.
  std::int64_t locate(const Location& u) const {
    if (network_) {
      if (u.segment < 0 || static_cast<std::size_t>(u.segment) >= seg_first_.size()) return -1;
      const auto k = seg_count_[u.segment];
      auto j = static_cast<std::int64_t>(std::floor(u.offset / seg_piece_[u.segment]));
      j = std::clamp<std::int64_t>(j, 0, k - 1);
      return seg_first_[u.segment] + j;
    }
    if (!(u.x >= grid_.xmin && u.x <= grid_.xmax && u.y >= grid_.ymin && u.y <= grid_.ymax))
      return -1;
    const double cw = grid_.width() / ncx_;
    const double ch = grid_.height() / ncy_;
    const int ix = std::clamp(static_cast<int>(std::floor((u.x - grid_.xmin) / cw)), 0, ncx_ - 1);
    const int iy = std::clamp(static_cast<int>(std::floor((u.y - grid_.ymin) / ch)), 0, ncy_ - 1);
    const auto id = grid_cell_[static_cast<std::size_t>(iy) * ncx_ + ix];
    if (id >= 0) return id;
    // Boundary round-off: fall back to a neighbouring cell with active area.
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int jx = ix + dx;
        const int jy = iy + dy;
        if (jx < 0 || jy < 0 || jx >= ncx_ || jy >= ncy_) continue;
        const auto alt = grid_cell_[static_cast<std::size_t>(jy) * ncx_ + jx];
        if (alt >= 0) return alt;
      }
    return -1;
  }

  bool is_network() const { return network_; }
  int grid_nx() const { return ncx_; }
  int grid_ny() const { return ncy_; }
  const Rect& grid_bounds() const { return grid_; }
  /// Rectangle of a planar cell (its active part may be smaller).
  Rect cell_rect(std::size_t id) const {
    const auto g = cell_key_[id];
    const double cw = grid_.width() / ncx_;
    const double ch = grid_.height() / ncy_;
    const auto cx = static_cast<double>(g % ncx_);
    const auto cy = static_cast<double>(g / ncx_);
    return {grid_.xmin + cx * cw, grid_.xmin + (cx + 1) * cw, grid_.ymin + cy * ch,
            grid_.ymin + (cy + 1) * ch};
  }
  /// Segment carrying a network cell, and its [lo, hi] offset range.
  std::int32_t cell_segment(std::size_t id) const { return static_cast<std::int32_t>(cell_key_[id]); }
  std::pair<double, double> cell_range(std::size_t id) const {
    const auto s = cell_key_[id];
    const auto j = static_cast<double>(static_cast<std::int64_t>(id) - seg_first_[s]);
    const bool last = static_cast<std::int64_t>(id) - seg_first_[s] + 1 == seg_count_[s];
    return {j * seg_piece_[s], last ? seg_len_[s] : (j + 1) * seg_piece_[s]};
  }

  /// Network case: cells on a segment are [first, first + count).
  std::int64_t segment_first(std::size_t s) const { return seg_first_[s]; }
  std::int64_t segment_count(std::size_t s) const { return seg_count_[s]; }
  double segment_piece(std::size_t s) const { return seg_piece_[s]; }

  static Subdivision planar(const PlanarWindow& w, std::size_t target) {
    require(target >= 1, ErrorKind::invalid_argument, "target cell count must be >= 1");
    const double frac = static_cast<double>(w.active_count()) /
                        (static_cast<double>(w.nx()) * w.ny());
    const double total = static_cast<double>(target) / frac;
    const double aspect = w.bounds().width() / w.bounds().height();
    int ncx = std::max(1, static_cast<int>(std::lround(std::sqrt(total * aspect))));
    int ncy = std::max(1, static_cast<int>(std::lround(total / ncx)));
    return planar_grid(w, ncx, ncy);
  }

  /// Equal rectangular cells on an ncx x ncy grid, restricted to the mask.
  static Subdivision planar_grid(const PlanarWindow& w, int ncx, int ncy) {
    require(ncx >= 1 && ncy >= 1, ErrorKind::invalid_argument, "grid must be at least 1x1");
    Subdivision sub;
    sub.network_ = false;
    sub.grid_ = w.bounds();
    sub.ncx_ = ncx;
    sub.ncy_ = ncy;
    const Rect& b = w.bounds();
    const double cw = b.width() / ncx;
    const double ch = b.height() / ncy;
    const double pw = w.pixel_width();
    const double ph = w.pixel_height();
    std::vector<double> area(static_cast<std::size_t>(ncx) * ncy, 0.0);
    // Active pixel nearest each cell center, used when the center itself is masked out.
    std::vector<std::int64_t> nearest(area.size(), -1);
    std::vector<double> nearest_d(area.size(), kInf);
    for (int iy = 0; iy < w.ny(); ++iy) {
      const double py0 = b.ymin + iy * ph;
      const double py1 = py0 + ph;
      const int cy0 = std::clamp(static_cast<int>(std::floor((py0 - b.ymin) / ch)), 0, ncy - 1);
      const int cy1 = std::clamp(static_cast<int>(std::floor((py1 - b.ymin) / ch)), 0, ncy - 1);
      for (int ix = 0; ix < w.nx(); ++ix) {
        if (!w.active(ix, iy)) continue;
        const double px0 = b.xmin + ix * pw;
        const double px1 = px0 + pw;
        const int cx0 = std::clamp(static_cast<int>(std::floor((px0 - b.xmin) / cw)), 0, ncx - 1);
        const int cx1 = std::clamp(static_cast<int>(std::floor((px1 - b.xmin) / cw)), 0, ncx - 1);
        const std::int64_t pidx = static_cast<std::int64_t>(iy) * w.nx() + ix;
        const Point2 pc = w.pixel_center(pidx);
        for (int cy = cy0; cy <= cy1; ++cy)
          for (int cx = cx0; cx <= cx1; ++cx) {
            const double ox = std::min(px1, b.xmin + (cx + 1) * cw) - std::max(px0, b.xmin + cx * cw);
            const double oy = std::min(py1, b.ymin + (cy + 1) * ch) - std::max(py0, b.ymin + cy * ch);
            if (ox <= 0 || oy <= 0) continue;
            const auto cidx = static_cast<std::size_t>(cy) * ncx + cx;
            area[cidx] += ox * oy;
            const Point2 cc{b.xmin + (cx + 0.5) * cw, b.ymin + (cy + 0.5) * ch};
            const double d = euclidean(pc, cc);
            if (d < nearest_d[cidx]) {
              nearest_d[cidx] = d;
              nearest[cidx] = pidx;
            }
          }
      }
    }
    sub.grid_cell_.assign(area.size(), -1);
    for (int cy = 0; cy < ncy; ++cy)
      for (int cx = 0; cx < ncx; ++cx) {
        const auto cidx = static_cast<std::size_t>(cy) * ncx + cx;
        if (area[cidx] <= 0.0) continue;
        Point2 c{b.xmin + (cx + 0.5) * cw, b.ymin + (cy + 0.5) * ch};
        if (!w.contains(c.x, c.y)) c = w.pixel_center(nearest[cidx]);
        sub.grid_cell_[cidx] = static_cast<std::int64_t>(sub.cells_.size());
        sub.cell_key_.push_back(static_cast<std::int64_t>(cidx));
        sub.cells_.push_back({Location{c.x, c.y, -1, 0.0}, area[cidx]});
      }
    return sub;
  }

  static Subdivision network(const LinearNetwork& net, std::size_t target) {
    require(target >= 1, ErrorKind::invalid_argument, "target cell count must be >= 1");
    const double h = net.measure() / static_cast<double>(target);
    Subdivision sub;
    sub.network_ = true;
    const auto& segs = net.segments();
    sub.seg_first_.resize(segs.size());
    sub.seg_count_.resize(segs.size());
    sub.seg_piece_.resize(segs.size());
    sub.seg_len_.resize(segs.size());
    for (std::size_t s = 0; s < segs.size(); ++s) {
      const double len = segs[s].length;
      const auto k = std::max<std::int64_t>(
          1, static_cast<std::int64_t>(std::ceil(len / h - 1e-9)));
      const double piece = len / static_cast<double>(k);
      sub.seg_first_[s] = static_cast<std::int64_t>(sub.cells_.size());
      sub.seg_count_[s] = k;
      sub.seg_piece_[s] = piece;
      sub.seg_len_[s] = len;
      for (std::int64_t j = 0; j < k; ++j) {
        const double off = std::min(len, (static_cast<double>(j) + 0.5) * piece);
        sub.cells_.push_back({net.at(static_cast<std::int32_t>(s), off), piece});
        sub.cell_key_.push_back(static_cast<std::int64_t>(s));
      }
    }
    return sub;
  }

 private:
  std::vector<Cell> cells_;
  bool network_ = false;
  Rect grid_{};
  int ncx_ = 0;
  int ncy_ = 0;
  std::vector<std::int64_t> grid_cell_;
  std::vector<std::int64_t> cell_key_;  // grid index (planar) or segment id (network)
  std::vector<std::int64_t> seg_first_;
  std::vector<std::int64_t> seg_count_;
  std::vector<double> seg_piece_;
  std::vector<double> seg_len_;
};

// ---------------------------------------------------------------------------

/// Either observation domain behind one interface. Immutable after
/// construction; safe to share across threads.
class Domain {
 public:
  Domain(PlanarWindow w) : impl_(std::move(w)) {}  // NOLINT(implicit)
  Domain(LinearNetwork n) : impl_(std::move(n)) {}  // NOLINT(implicit)

  bool is_network() const { return std::holds_alternative<LinearNetwork>(impl_); }
  const PlanarWindow& planar() const { return std::get<PlanarWindow>(impl_); }
  const LinearNetwork& network() const { return std::get<LinearNetwork>(impl_); }

  double measure() const {
    return is_network() ? network().measure() : planar().measure();
  }

  Rect bounding_box() const { return is_network() ? network().bounding_box() : planar().bounds(); }

  bool contains(const Location& u) const {
    if (is_network()) return network().contains(u);
    return !u.on_network() && planar().contains(u.x, u.y);
  }

  void check(const Location& u) const {
    require(contains(u), ErrorKind::off_domain, "location is not on the domain");
  }

  double distance(const Location& a, const Location& b) const {
    check(a);
    check(b);
    if (is_network()) return network().distance(a, b);
    return euclidean(a.point(), b.point());
  }

  Subdivision subdivide(std::size_t target) const {
    return is_network() ? Subdivision::network(network(), target)
                        : Subdivision::planar(planar(), target);
  }

 private:
  std::variant<PlanarWindow, LinearNetwork> impl_;
};

/// Distances from arbitrary sources to a fixed target set under the domain
/// metric. On networks one Dijkstra run serves a whole row.
class DistanceRows {
 public:
  DistanceRows(const Domain& domain, std::span<const Location> targets, bool euclidean_only = false)
      : domain_(domain), targets_(targets), euclid_(euclidean_only || !domain.is_network()) {}

  void row(const Location& src, std::vector<double>& out) const {
    out.resize(targets_.size());
    if (euclid_) {
      for (std::size_t j = 0; j < targets_.size(); ++j)
        out[j] = euclidean(src.point(), targets_[j].point());
      return;
    }
    const auto& net = domain_.network();
    const auto vd = net.vertex_distances(src);
    for (std::size_t j = 0; j < targets_.size(); ++j)
      out[j] = net.distance_from(vd, src, targets_[j]);
  }

  std::size_t size() const { return targets_.size(); }
  bool euclidean_metric() const { return euclid_; }

 private:
  const Domain& domain_;
  std::span<const Location> targets_;
  bool euclid_;
};

}  // namespace svci
