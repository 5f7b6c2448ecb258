#pragma once

// Point patterns, covariate fields and the file formats that feed them.

#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "svci/common.hpp"
#include "svci/geometry.hpp"
#include "svci/io.hpp"

namespace svci {

struct PointPattern {
  std::vector<Location> points;
  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Regular grid of values; row 0 is the bottom row (ymin). NaN marks no-data.
struct Raster {
  Rect bounds;
  int nx = 1;
  int ny = 1;
  std::vector<double> values;

  double cell_width() const { return bounds.width() / nx; }
  double cell_height() const { return bounds.height() / ny; }

  std::int64_t index_of(Point2 p) const {
    if (!(p.x >= bounds.xmin && p.x <= bounds.xmax && p.y >= bounds.ymin && p.y <= bounds.ymax))
      return -1;
    const int ix = std::clamp(static_cast<int>(std::floor((p.x - bounds.xmin) / cell_width())), 0, nx - 1);
    const int iy = std::clamp(static_cast<int>(std::floor((p.y - bounds.ymin) / cell_height())), 0, ny - 1);
    return static_cast<std::int64_t>(iy) * nx + ix;
  }

  Point2 center(std::int64_t idx) const {
    return {bounds.xmin + (static_cast<double>(idx % nx) + 0.5) * cell_width(),
            bounds.ymin + (static_cast<double>(idx / nx) + 0.5) * cell_height()};
  }

  double at(Point2 p) const {
    const auto idx = index_of(p);
    require(idx >= 0, ErrorKind::off_domain, "location outside covariate raster");
    const double v = values[static_cast<std::size_t>(idx)];
    require(std::isfinite(v), ErrorKind::numerical, "covariate raster has no data at location");
    return v;
  }
};

struct Covariate {
  enum class Source { raster, network_piecewise, point_column };

  std::string name;
  Source source = Source::raster;
  Raster raster;                       // raster
  std::vector<double> segment_values;  // network_piecewise, one per segment
  std::vector<Point2> sites;           // point_column
  std::vector<double> site_values;

  /// Unstandardized value. Network locations read rasters through their
  /// planar embedding; point columns use the nearest supplied site.
  double raw(const Location& u) const {
    switch (source) {
      case Source::raster:
        return raster.at(u.point());
      case Source::network_piecewise:
        require(u.on_network() && static_cast<std::size_t>(u.segment) < segment_values.size(),
                ErrorKind::off_domain, "no per-segment value for location");
        return segment_values[u.segment];
      case Source::point_column: {
        require(!sites.empty(), ErrorKind::numerical, "point-column covariate has no sites");
        std::size_t best = 0;
        double bd = kInf;
        for (std::size_t i = 0; i < sites.size(); ++i) {
          const double d = euclidean(sites[i], u.point());
          if (d < bd) {
            bd = d;
            best = i;
          }
        }
        return site_values[best];
      }
    }
    return 0.0;
  }
};

/// p named covariates plus optional centering/scaling. The intercept is not
/// part of the field; design matrices add it.
class CovariateField {
 public:
  CovariateField() = default;
  explicit CovariateField(std::vector<Covariate> covariates)
      : covariates_(std::move(covariates)),
        mean_(covariates_.size(), 0.0),
        sd_(covariates_.size(), 1.0) {}

  std::size_t size() const { return covariates_.size(); }
  const std::vector<Covariate>& covariates() const { return covariates_; }
  bool standardized() const { return standardized_; }
  const std::vector<double>& means() const { return mean_; }
  const std::vector<double>& sds() const { return sd_; }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& c : covariates_) out.push_back(c.name);
    return out;
  }

  /// Sets centering/scaling from the sample mean and sd (n-1 denominator) of the
  /// raw covariates at `sites`. A constant covariate keeps sd = 1.
  void standardize_over(std::span<const Location> sites) {
    const std::size_t p = size();
    mean_.assign(p, 0.0);
    sd_.assign(p, 1.0);
    standardized_ = true;
    if (sites.size() < 2) return;
    for (std::size_t k = 0; k < p; ++k) {
      std::vector<double> v(sites.size());
      for (std::size_t i = 0; i < sites.size(); ++i) v[i] = covariates_[k].raw(sites[i]);
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - m) * (x - m);
      const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
      mean_[k] = m;
      sd_[k] = sd > 0.0 ? sd : 1.0;
    }
  }

  void set_standardization(std::vector<double> mean, std::vector<double> sd) {
    require(mean.size() == size() && sd.size() == size(), ErrorKind::dimension,
            "standardization metadata size mismatch");
    mean_ = std::move(mean);
    sd_ = std::move(sd);
    standardized_ = true;
  }

  void clear_standardization() {
    mean_.assign(size(), 0.0);
    sd_.assign(size(), 1.0);
    standardized_ = false;
  }

  void at(const Location& u, std::span<double> out) const {
    require(out.size() == size(), ErrorKind::dimension, "covariate output size mismatch");
    for (std::size_t k = 0; k < size(); ++k) {
      const double r = covariates_[k].raw(u);
      out[k] = standardized_ ? (r - mean_[k]) / sd_[k] : r;
    }
  }

  std::vector<double> at(const Location& u) const {
    std::vector<double> out(size());
    at(u, out);
    return out;
  }

 private:
  std::vector<Covariate> covariates_;
  std::vector<double> mean_;
  std::vector<double> sd_;
  bool standardized_ = false;
};

inline std::vector<double> covariate_at(const CovariateField& field, const Location& u) {
  return field.at(u);
}

// ---------------------------------------------------------------------------
// Point ingestion

struct LoadOptions {
  bool strict = true;           // planar: off-mask points are an error instead of dropped
  double snap_tolerance = -1.0; // network: < 0 means 1% of the bounding-box diagonal
  bool dedup = false;           // drop exact duplicate coordinates
};

struct LoadReport {
  std::size_t read = 0;
  std::size_t dropped = 0;
  std::size_t snapped = 0;
  std::size_t duplicates = 0;
};

struct LoadedPoints {
  PointPattern pattern;
  std::vector<std::string> extra_names;          // columns after x,y
  std::vector<std::vector<double>> extra_values; // [column][point]
  LoadReport report;
};

inline LoadedPoints load_pattern_table(const io::Table& table, const Domain& domain,
                                       const LoadOptions& opts = {}) {
  const auto cx = table.column("x");
  const auto cy = table.column("y");
  require(cx >= 0 && cy >= 0, ErrorKind::parse, "points CSV needs x and y columns");
  // Network files written by this library carry exact (segment, offset).
  const auto cs = domain.is_network() ? table.column("segment") : -1;
  const auto co = domain.is_network() ? table.column("offset") : -1;
  const bool exact_net = cs >= 0 && co >= 0;
  LoadedPoints out;
  std::vector<std::size_t> extra_cols;
  for (std::size_t c = 0; c < table.header.size(); ++c)
    if (const auto ci = static_cast<std::ptrdiff_t>(c);
        ci != cx && ci != cy && !(exact_net && (ci == cs || ci == co))) {
      extra_cols.push_back(c);
      out.extra_names.push_back(table.header[c]);
    }
  out.extra_values.resize(extra_cols.size());

  double tol = opts.snap_tolerance;
  if (domain.is_network() && tol < 0) tol = 0.01 * domain.bounding_box().diagonal();

  std::vector<std::pair<double, double>> seen;
  for (const auto& row : table.rows) {
    ++out.report.read;
    const double x = io::parse_double(row[cx]);
    const double y = io::parse_double(row[cy]);
    if (opts.dedup) {
      const std::pair<double, double> key{x, y};
      if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
        ++out.report.duplicates;
        continue;
      }
      seen.push_back(key);
    }
    Location loc;
    if (exact_net) {
      loc = {x, y, static_cast<std::int32_t>(io::parse_int(row[cs])), io::parse_double(row[co])};
      require(domain.contains(loc), ErrorKind::off_domain, "segment/offset not on the network");
    } else if (domain.is_network()) {
      const auto proj = domain.network().project({x, y});
      if (proj.distance > tol)
        throw Error(ErrorKind::off_domain, "point (" + io::fmt(x) + ", " + io::fmt(y) +
                                               ") is farther than the snap tolerance from the network");
      loc = proj.location;
      if (proj.distance > 0.0) ++out.report.snapped;
    } else {
      loc = {x, y, -1, 0.0};
      if (!domain.contains(loc)) {
        if (opts.strict)
          throw Error(ErrorKind::off_domain,
                      "point (" + io::fmt(x) + ", " + io::fmt(y) + ") is outside the window mask");
        ++out.report.dropped;
        continue;
      }
    }
    out.pattern.points.push_back(loc);
    for (std::size_t e = 0; e < extra_cols.size(); ++e)
      out.extra_values[e].push_back(io::parse_double(row[extra_cols[e]]));
  }
  return out;
}

inline LoadedPoints load_pattern(const std::string& path, const Domain& domain,
                                 const LoadOptions& opts = {}) {
  return load_pattern_table(io::read_csv(path), domain, opts);
}

/// Writes x,y (and segment,offset on networks) with round-trip precision.
inline std::string pattern_csv(const PointPattern& pattern) {
  const bool net = !pattern.empty() && pattern.points.front().on_network();
  std::string s = net ? "x,y,segment,offset\n" : "x,y\n";
  for (const auto& p : pattern.points) {
    s += io::fmt(p.x) + "," + io::fmt(p.y);
    if (net) s += "," + std::to_string(p.segment) + "," + io::fmt(p.offset);
    s += "\n";
  }
  return s;
}

/// Point-column covariates from the extra columns of a loaded points file.
inline std::vector<Covariate> point_column_covariates(const LoadedPoints& lp) {
  std::vector<Covariate> out;
  for (std::size_t e = 0; e < lp.extra_names.size(); ++e) {
    Covariate c;
    c.name = lp.extra_names[e];
    c.source = Covariate::Source::point_column;
    for (const auto& p : lp.pattern.points) c.sites.push_back(p.point());
    c.site_values = lp.extra_values[e];
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Domain and raster formats

/// `nodes.csv` (id,x,y) + `edges.csv` (id,from,to). Node ids may be arbitrary
/// integers; edges reference them by id.
inline LinearNetwork load_network_csv(const std::string& nodes_path, const std::string& edges_path) {
  const auto nodes = io::read_csv(nodes_path);
  const auto edges = io::read_csv(edges_path);
  const auto ni = nodes.column("id"), nx = nodes.column("x"), ny = nodes.column("y");
  const auto ef = edges.column("from"), et = edges.column("to");
  require(ni >= 0 && nx >= 0 && ny >= 0, ErrorKind::parse, "nodes.csv needs id,x,y");
  require(ef >= 0 && et >= 0, ErrorKind::parse, "edges.csv needs from,to");
  std::map<long long, int> index;
  std::vector<Point2> verts;
  for (const auto& r : nodes.rows) {
    const auto id = io::parse_int(r[ni]);
    require(!index.contains(id), ErrorKind::parse, "duplicate node id " + std::to_string(id));
    index[id] = static_cast<int>(verts.size());
    verts.push_back({io::parse_double(r[nx]), io::parse_double(r[ny])});
  }
  std::vector<std::pair<int, int>> segs;
  for (const auto& r : edges.rows) {
    const auto a = io::parse_int(r[ef]);
    const auto b = io::parse_int(r[et]);
    require(index.contains(a) && index.contains(b), ErrorKind::parse,
            "edge references unknown node id");
    segs.emplace_back(index[a], index[b]);
  }
  return LinearNetwork(std::move(verts), segs);
}

inline std::pair<std::string, std::string> network_csv(const LinearNetwork& net) {
  std::string nodes = "id,x,y\n";
  for (std::size_t i = 0; i < net.vertices().size(); ++i)
    nodes += std::to_string(i) + "," + io::fmt(net.vertices()[i].x) + "," +
             io::fmt(net.vertices()[i].y) + "\n";
  std::string edges = "id,from,to\n";
  for (std::size_t s = 0; s < net.segments().size(); ++s)
    edges += std::to_string(s) + "," + std::to_string(net.segments()[s].from) + "," +
             std::to_string(net.segments()[s].to) + "\n";
  return {nodes, edges};
}

/// GeoJSON LineString / MultiLineString features; consecutive coordinates form
/// segments and identical coordinates are merged into one vertex.
inline LinearNetwork load_network_geojson(const nlohmann::json& gj) {
  std::map<std::pair<double, double>, int> index;
  std::vector<Point2> verts;
  std::vector<std::pair<int, int>> segs;
  auto vertex = [&](const nlohmann::json& c) {
    const std::pair<double, double> key{c.at(0).get<double>(), c.at(1).get<double>()};
    auto it = index.find(key);
    if (it != index.end()) return it->second;
    const int id = static_cast<int>(verts.size());
    index[key] = id;
    verts.push_back({key.first, key.second});
    return id;
  };
  auto add_line = [&](const nlohmann::json& coords) {
    for (std::size_t i = 1; i < coords.size(); ++i) {
      const int a = vertex(coords[i - 1]);
      const int b = vertex(coords[i]);
      if (a != b) segs.emplace_back(a, b);
    }
  };
  auto add_geometry = [&](const nlohmann::json& g) {
    const auto type = g.at("type").get<std::string>();
    if (type == "LineString") add_line(g.at("coordinates"));
    else if (type == "MultiLineString")
      for (const auto& l : g.at("coordinates")) add_line(l);
  };
  try {
    if (gj.at("type") == "FeatureCollection") {
      for (const auto& f : gj.at("features")) add_geometry(f.at("geometry"));
    } else if (gj.at("type") == "Feature") {
      add_geometry(gj.at("geometry"));
    } else {
      add_geometry(gj);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed GeoJSON network: ") + e.what());
  }
  return LinearNetwork(std::move(verts), segs);
}

/// Polygon / MultiPolygon rings from GeoJSON, for rasterizing window masks.
inline std::vector<Ring> load_polygon_rings(const nlohmann::json& gj) {
  std::vector<Ring> rings;
  auto add_poly = [&](const nlohmann::json& poly) {
    for (const auto& ring : poly) {
      Ring r;
      for (const auto& c : ring) r.push_back({c.at(0).get<double>(), c.at(1).get<double>()});
      rings.push_back(std::move(r));
    }
  };
  auto add_geometry = [&](const nlohmann::json& g) {
    const auto type = g.at("type").get<std::string>();
    if (type == "Polygon") add_poly(g.at("coordinates"));
    else if (type == "MultiPolygon")
      for (const auto& p : g.at("coordinates")) add_poly(p);
  };
  try {
    if (gj.at("type") == "FeatureCollection") {
      for (const auto& f : gj.at("features")) add_geometry(f.at("geometry"));
    } else if (gj.at("type") == "Feature") {
      add_geometry(gj.at("geometry"));
    } else {
      add_geometry(gj);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::parse, std::string("malformed GeoJSON polygon: ") + e.what());
  }
  require(!rings.empty(), ErrorKind::parse, "GeoJSON contains no polygon rings");
  return rings;
}

/// ESRI ASCII grid (ncols/nrows/xllcorner|xllcenter/yllcorner|yllcenter/
/// cellsize/NODATA_value, rows listed top to bottom).
inline Raster parse_esri_ascii(std::string_view text) {
  std::map<std::string, double> hdr;
  std::vector<double> vals;
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string_view {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    const auto start = pos;
    while (pos < text.size() && !std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    return text.substr(start, pos - start);
  };
  for (;;) {
    const auto save = pos;
    auto tok = next_token();
    if (tok.empty()) break;
    if (std::isalpha(static_cast<unsigned char>(tok.front()))) {
      std::string key(tok);
      for (auto& ch : key) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      hdr[key] = io::parse_double(next_token());
    } else {
      pos = save;
      break;
    }
  }
  require(hdr.contains("ncols") && hdr.contains("nrows") && hdr.contains("cellsize"),
          ErrorKind::parse, "ESRI ASCII grid header incomplete");
  Raster r;
  r.nx = static_cast<int>(hdr["ncols"]);
  r.ny = static_cast<int>(hdr["nrows"]);
  const double cs = hdr["cellsize"];
  double x0 = hdr.contains("xllcorner") ? hdr["xllcorner"] : hdr["xllcenter"] - cs / 2;
  double y0 = hdr.contains("yllcorner") ? hdr["yllcorner"] : hdr["yllcenter"] - cs / 2;
  r.bounds = {x0, x0 + cs * r.nx, y0, y0 + cs * r.ny};
  const bool has_nodata = hdr.contains("nodata_value");
  const double nodata = has_nodata ? hdr["nodata_value"] : 0.0;
  for (auto tok = next_token(); !tok.empty(); tok = next_token()) vals.push_back(io::parse_double(tok));
  require(vals.size() == static_cast<std::size_t>(r.nx) * r.ny, ErrorKind::parse,
          "ESRI ASCII grid has wrong number of values");
  r.values.resize(vals.size());
  for (int row = 0; row < r.ny; ++row)
    for (int ix = 0; ix < r.nx; ++ix) {
      double v = vals[static_cast<std::size_t>(row) * r.nx + ix];
      if (has_nodata && v == nodata) v = std::numeric_limits<double>::quiet_NaN();
      r.values[static_cast<std::size_t>(r.ny - 1 - row) * r.nx + ix] = v;
    }
  return r;
}

/// CSV grid: header `nx,ny,xmin,xmax,ymin,ymax`, one line of those values,
/// then ny rows of nx values with the first row at ymin. Empty or `nan` cells
/// are no-data.
inline Raster parse_csv_grid(std::string_view text) {
  const auto t = io::parse_csv(text, false);
  require(t.rows.size() >= 2, ErrorKind::parse, "CSV grid too short");
  const auto& h = t.rows[0];
  const auto& v = t.rows[1];
  require(h.size() == 6 && v.size() == 6 && h[0] == "nx", ErrorKind::parse,
          "CSV grid header must be nx,ny,xmin,xmax,ymin,ymax");
  Raster r;
  r.nx = static_cast<int>(io::parse_int(v[0]));
  r.ny = static_cast<int>(io::parse_int(v[1]));
  r.bounds = {io::parse_double(v[2]), io::parse_double(v[3]), io::parse_double(v[4]),
              io::parse_double(v[5])};
  require(r.nx >= 1 && r.ny >= 1 && t.rows.size() == static_cast<std::size_t>(r.ny) + 2,
          ErrorKind::parse, "CSV grid row count does not match ny");
  r.values.reserve(static_cast<std::size_t>(r.nx) * r.ny);
  for (int iy = 0; iy < r.ny; ++iy) {
    const auto& row = t.rows[static_cast<std::size_t>(iy) + 2];
    require(row.size() == static_cast<std::size_t>(r.nx), ErrorKind::parse,
            "CSV grid row has wrong length");
    for (const auto& cell : row)
      r.values.push_back(cell.empty() || cell == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                                       : io::parse_double(cell));
  }
  return r;
}

inline std::string csv_grid(const Raster& r) {
  std::string s = "nx,ny,xmin,xmax,ymin,ymax\n";
  s += std::to_string(r.nx) + "," + std::to_string(r.ny) + "," + io::fmt(r.bounds.xmin) + "," +
       io::fmt(r.bounds.xmax) + "," + io::fmt(r.bounds.ymin) + "," + io::fmt(r.bounds.ymax) + "\n";
  for (int iy = 0; iy < r.ny; ++iy) {
    for (int ix = 0; ix < r.nx; ++ix) {
      if (ix) s += ",";
      const double v = r.values[static_cast<std::size_t>(iy) * r.nx + ix];
      s += std::isfinite(v) ? io::fmt(v) : std::string("nan");
    }
    s += "\n";
  }
  return s;
}

inline Raster load_raster(const std::string& path) {
  const auto text = io::read_file(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text.compare(first, 2, "nx") == 0) return parse_csv_grid(text);
  return parse_esri_ascii(text);
}

}  // namespace svci
