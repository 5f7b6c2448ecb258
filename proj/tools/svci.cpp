// svci command-line front end: simulate, fit, path, evaluate, export-graph.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "svci/svci.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace svci;

namespace {

// ---------------------------------------------------------------------------
// Configuration

json default_run_config() {
  return json{
      {"domain", nullptr},
      {"points", nullptr},
      {"load", {{"strict", true}, {"snap_tolerance", -1.0}, {"dedup", false}}},
      {"covariates", json::array()},
      {"quadrature",
       {{"kind", "poisson"}, {"nd", 0}, {"delta_mode", "constant"}, {"bandwidth", -1.0}, {"standardize", true}}},
      {"graph", {{"method", "knn"}, {"k", 5}, {"radius", 0.0}, {"max_len", -1.0}, {"metric", "domain"}}},
      {"lambda", nullptr},
      {"path",
       {{"n_lambda", 20}, {"min_ratio", 1e-3}, {"grid", json::array()}, {"accelerate", true}, {"warm_start", true}}},
      {"solver",
       {{"max_outer", 500},
        {"outer_tol", 1e-7},
        {"fixed_point_tol", 1e-6},
        {"admm_max", 200},
        {"admm_tol", 1e-6},
        {"gamma", 1.0},
        {"adapt_gamma", true},
        {"accelerate", false},
        {"polish", true},
        {"refine", true},
        {"eta_max", 50.0}}},
      {"cluster_eps", -1.0},
      {"seed", 0},
      {"threads", 0},
  };
}

json default_sim_config() {
  return json{{"scenario", "1"}, {"R", 10.0},       {"target_n", 800.0},  {"sigma2", 1.0},
              {"phi", -1.0},     {"lattice", 32},   {"resolution", 100}, {"seed", 1},
              {"eval_cells", 4096}};
}

// Collects every violation before failing.
struct Violations {
  std::vector<std::string> items;
  void add(std::string s) {
    if (std::find(items.begin(), items.end(), s) == items.end()) items.push_back(std::move(s));
  }
  bool empty() const { return items.empty(); }
};

class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> v)
      : Error(ErrorKind::config, join(v)), violations(std::move(v)) {}
  std::vector<std::string> violations;

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = std::to_string(v.size()) + " configuration error(s)";
    for (const auto& x : v) s += "; " + x;
    return s;
  }
};

template <class T>
T get_or(const json& j, const std::string& path, const std::string& key, T fallback, Violations& bad) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    bad.add(path + key + ": wrong type (" + j.at(key).dump() + ")");
    return fallback;
  }
}

std::string resolve_path(const fs::path& base, const std::string& p) {
  const fs::path q(p);
  return (q.is_absolute() ? q : base / q).lexically_normal().string();
}

json load_config_file(const std::string& path) {
  if (path.empty()) return json::object();
  try {
    return json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::parse, "config '" + path + "' is not valid JSON: " + e.what());
  }
}

// Makes every file reference in a run config absolute so the resolved config
// in the manifest reruns from anywhere.
void absolutize(json& cfg, const fs::path& base, Violations& bad) {
  auto fix = [&](json& obj, const std::string& key, const std::string& where) {
    if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return;
    if (!obj.at(key).is_string()) {
      bad.add(where + key + ": expected a file path");
      return;
    }
    obj[key] = resolve_path(base, obj.at(key).get<std::string>());
    if (!fs::exists(obj[key].get<std::string>())) bad.add(where + key + ": file not found: " + obj[key].get<std::string>());
  };
  fix(cfg, "points", "");
  if (cfg["domain"].is_object())
    for (const char* k : {"nodes", "edges", "geojson", "polygon", "mask"}) fix(cfg["domain"], k, "domain.");
  if (cfg["covariates"].is_array())
    for (std::size_t i = 0; i < cfg["covariates"].size(); ++i)
      for (const char* k : {"raster", "segments"})
        fix(cfg["covariates"][i], k, "covariates[" + std::to_string(i) + "].");
}

struct RunInputs {
  std::optional<Domain> domain;
  LoadedPoints loaded;
  CovariateField field;
  GraphSpec graph;
  QuadratureSpec quad;
  FitOptions fit;
  PathOptions path;
  std::vector<double> grid;
  std::optional<double> lambda;
};

Domain build_domain(const json& d, Violations& bad) {
  const auto type = get_or<std::string>(d, "domain.", "type", "", bad);
  if (type == "planar") {
    const auto b = get_or<std::vector<double>>(d, "domain.", "bounds", {}, bad);
    const int nx = get_or<int>(d, "domain.", "nx", 100, bad);
    const int ny = get_or<int>(d, "domain.", "ny", nx, bad);
    if (b.size() != 4) {
      bad.add("domain.bounds: expected [xmin, xmax, ymin, ymax]");
      throw ConfigError(bad.items);
    }
    const Rect r{b[0], b[1], b[2], b[3]};
    if (d.contains("polygon")) {
      const auto rings = load_polygon_rings(json::parse(io::read_file(d.at("polygon").get<std::string>())));
      return PlanarWindow::from_polygon(r, nx, ny, rings);
    }
    if (d.contains("mask")) {
      const auto m = load_raster(d.at("mask").get<std::string>());
      require(m.nx == nx && m.ny == ny, ErrorKind::config, "domain.mask grid does not match nx, ny");
      std::vector<std::uint8_t> mask(m.values.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = std::isfinite(m.values[i]) && m.values[i] != 0.0;
      return PlanarWindow(r, nx, ny, std::move(mask));
    }
    return PlanarWindow(r, nx, ny);
  }
  if (type == "network") {
    if (d.contains("geojson")) return load_network_geojson(json::parse(io::read_file(d.at("geojson").get<std::string>())));
    if (d.contains("nodes") && d.contains("edges"))
      return load_network_csv(d.at("nodes").get<std::string>(), d.at("edges").get<std::string>());
    bad.add("domain: network needs either geojson or nodes + edges");
    throw ConfigError(bad.items);
  }
  bad.add("domain.type: expected \"planar\" or \"network\"");
  throw ConfigError(bad.items);
}

// Reads and checks a resolved run config. Structural problems are collected
// and reported together; file contents are read only once the structure is
// valid.
// File-reference violations from absolutize arrive in `bad` so all are reported together.
RunInputs build_inputs(const json& cfg, bool need_lambda, Violations bad) {
  RunInputs in;

  if (!cfg["domain"].is_object()) bad.add("domain: required object");
  else if (cfg["domain"].value("type", "") == "planar") {
    const auto& d = cfg["domain"];
    const auto b = get_or<std::vector<double>>(d, "domain.", "bounds", {}, bad);
    if (b.size() != 4 || !(b[0] < b[1]) || !(b[2] < b[3]))
      bad.add("domain.bounds: expected [xmin, xmax, ymin, ymax] with xmin < xmax, ymin < ymax");
    const int nx = get_or<int>(d, "domain.", "nx", 100, bad);
    if (nx < 1) bad.add("domain.nx: must be >= 1");
    if (get_or<int>(d, "domain.", "ny", nx, bad) < 1) bad.add("domain.ny: must be >= 1");
  }
  if (!cfg["points"].is_string()) bad.add("points: required path to a points CSV");
  if (!cfg["covariates"].is_array()) bad.add("covariates: expected an array");

  const auto& qj = cfg["quadrature"];
  try {
    in.quad.kind = parse_likelihood(get_or<std::string>(qj, "quadrature.", "kind", "poisson", bad));
  } catch (const Error& e) {
    bad.add(std::string("quadrature.kind: ") + e.what());
  }
  try {
    in.quad.delta_mode = parse_delta_mode(get_or<std::string>(qj, "quadrature.", "delta_mode", "constant", bad));
  } catch (const Error& e) {
    bad.add(std::string("quadrature.delta_mode: ") + e.what());
  }
  const long nd = get_or<long>(qj, "quadrature.", "nd", 0, bad);
  if (nd < 0) bad.add("quadrature.nd: must be >= 0");
  in.quad.nd = static_cast<std::size_t>(std::max(0L, nd));
  in.quad.bandwidth = get_or<double>(qj, "quadrature.", "bandwidth", -1.0, bad);
  in.quad.standardize = get_or<bool>(qj, "quadrature.", "standardize", true, bad);

  const auto& gj = cfg["graph"];
  try {
    in.graph.method = parse_graph_method(get_or<std::string>(gj, "graph.", "method", "knn", bad));
  } catch (const Error& e) {
    bad.add(std::string("graph.method: ") + e.what());
  }
  in.graph.k = get_or<int>(gj, "graph.", "k", 5, bad);
  if (in.graph.k < 1) bad.add("graph.k: must be >= 1");
  in.graph.radius = get_or<double>(gj, "graph.", "radius", 0.0, bad);
  if (in.graph.method == GraphMethod::rnn && !(in.graph.radius > 0)) bad.add("graph.radius: rnn needs radius > 0");
  in.graph.max_len = get_or<double>(gj, "graph.", "max_len", -1.0, bad);
  const auto metric = get_or<std::string>(gj, "graph.", "metric", "domain", bad);
  if (metric != "domain" && metric != "euclidean") bad.add("graph.metric: expected \"domain\" or \"euclidean\"");
  in.graph.euclidean_metric = metric == "euclidean";

  const auto& sj = cfg["solver"];
  auto& so = in.fit.solver;
  so.max_outer = get_or<int>(sj, "solver.", "max_outer", so.max_outer, bad);
  so.outer_tol = get_or<double>(sj, "solver.", "outer_tol", so.outer_tol, bad);
  so.fixed_point_tol = get_or<double>(sj, "solver.", "fixed_point_tol", so.fixed_point_tol, bad);
  so.admm_max = get_or<int>(sj, "solver.", "admm_max", so.admm_max, bad);
  so.admm_tol = get_or<double>(sj, "solver.", "admm_tol", so.admm_tol, bad);
  so.gamma = get_or<double>(sj, "solver.", "gamma", so.gamma, bad);
  so.adapt_gamma = get_or<bool>(sj, "solver.", "adapt_gamma", so.adapt_gamma, bad);
  so.accelerate = get_or<bool>(sj, "solver.", "accelerate", so.accelerate, bad);
  so.polish = get_or<bool>(sj, "solver.", "polish", so.polish, bad);
  so.refine = get_or<bool>(sj, "solver.", "refine", so.refine, bad);
  so.eta_max = get_or<double>(sj, "solver.", "eta_max", so.eta_max, bad);
  try {
    so.validate();
  } catch (const Error& e) {
    bad.add(std::string("solver: ") + e.what());
  }
  if (!(so.eta_max > 0)) bad.add("solver.eta_max: must be positive");
  const long threads = get_or<long>(cfg, "", "threads", 0, bad);
  if (threads < 0) bad.add("threads: must be >= 0");
  so.threads = resolve_threads(static_cast<unsigned>(std::max(0L, threads)));
  const auto seed = get_or<std::uint64_t>(cfg, "", "seed", 0, bad);
  so.seed = seed;
  in.quad.seed = derive_seed(seed, "quadrature");
  in.fit.cluster_eps = get_or<double>(cfg, "", "cluster_eps", -1.0, bad);

  const auto& pj = cfg["path"];
  in.path.n_lambda = get_or<std::size_t>(pj, "path.", "n_lambda", 20, bad);
  if (in.path.n_lambda < 1) bad.add("path.n_lambda: must be >= 1");
  in.path.min_ratio = get_or<double>(pj, "path.", "min_ratio", 1e-3, bad);
  if (!(in.path.min_ratio > 0 && in.path.min_ratio < 1)) bad.add("path.min_ratio: must lie in (0, 1)");
  in.path.accelerate = get_or<bool>(pj, "path.", "accelerate", true, bad);
  in.path.warm_start = get_or<bool>(pj, "path.", "warm_start", true, bad);
  in.grid = get_or<std::vector<double>>(pj, "path.", "grid", {}, bad);
  for (double l : in.grid)
    if (!(l > 0)) bad.add("path.grid: values must be positive");
  in.path.fit = in.fit;

  if (cfg.contains("lambda") && !cfg["lambda"].is_null()) {
    in.lambda = get_or<double>(cfg, "", "lambda", 0.0, bad);
    if (!(*in.lambda > 0)) bad.add("lambda: must be positive");
  } else if (need_lambda) {
    bad.add("lambda: required for fit (or use the path command)");
  }

  if (cfg["covariates"].is_array())
    for (std::size_t i = 0; i < cfg["covariates"].size(); ++i) {
      const auto& c = cfg["covariates"][i];
      const std::string where = "covariates[" + std::to_string(i) + "].";
      if (!c.is_object() || !c.contains("name") || !c["name"].is_string()) bad.add(where + "name: required string");
      int sources = 0;
      for (const char* k : {"raster", "segments", "column"}) sources += c.is_object() && c.contains(k);
      if (sources != 1) bad.add(where + ": give exactly one of raster, segments, column");
    }

  if (!bad.empty()) throw ConfigError(bad.items);

  in.domain = build_domain(cfg["domain"], bad);
  if (in.domain->is_network() && in.graph.method == GraphMethod::delaunay)
    bad.add("graph.method: delaunay is not available on networks");
  if (!in.domain->is_network() && in.graph.method == GraphMethod::network_chain)
    bad.add("graph.method: network_chain needs a network domain");

  LoadOptions lo;
  lo.strict = get_or<bool>(cfg["load"], "load.", "strict", true, bad);
  lo.snap_tolerance = get_or<double>(cfg["load"], "load.", "snap_tolerance", -1.0, bad);
  lo.dedup = get_or<bool>(cfg["load"], "load.", "dedup", false, bad);
  if (!bad.empty()) throw ConfigError(bad.items);

  in.loaded = load_pattern(cfg["points"].get<std::string>(), *in.domain, lo);
  require(!in.loaded.pattern.empty(), ErrorKind::invalid_argument, "points file holds no usable points");

  const auto column_covs = point_column_covariates(in.loaded);
  std::vector<Covariate> covs;
  for (const auto& c : cfg["covariates"]) {
    Covariate cov;
    cov.name = c["name"].get<std::string>();
    if (c.contains("raster")) {
      cov.source = Covariate::Source::raster;
      cov.raster = load_raster(c["raster"].get<std::string>());
    } else if (c.contains("segments")) {
      require(in.domain->is_network(), ErrorKind::config, "covariate '" + cov.name + "': segments need a network");
      cov.source = Covariate::Source::network_piecewise;
      const auto t = io::read_csv(c["segments"].get<std::string>());
      const auto col = t.column("value");
      require(col >= 0, ErrorKind::parse, "segment covariate file needs a 'value' column");
      for (const auto& row : t.rows) cov.segment_values.push_back(io::parse_double(row[static_cast<std::size_t>(col)]));
      require(cov.segment_values.size() == in.domain->network().segments().size(), ErrorKind::dimension,
              "covariate '" + cov.name + "' has one value per segment required");
    } else {
      const auto want = c["column"].get<std::string>();
      const auto it = std::find_if(column_covs.begin(), column_covs.end(),
                                   [&](const Covariate& x) { return x.name == want; });
      require(it != column_covs.end(), ErrorKind::config, "covariate column '" + want + "' not in the points file");
      cov = *it;
      cov.name = c["name"].get<std::string>();
    }
    covs.push_back(std::move(cov));
  }
  in.field = CovariateField(std::move(covs));
  return in;
}

// ---------------------------------------------------------------------------
// Output helpers

struct RunContext {
  std::string command;
  fs::path out;
  json resolved;
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started_at;

  void write(const std::string& name, std::string_view content) {
    io::write_file((out / name).string(), content);
    outputs.push_back(name);
  }
  void write_json(const std::string& name, const json& j) { write(name, j.dump(2) + "\n"); }
};

std::string utc_now() {
  const auto t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(RunContext& ctx, unsigned threads) {
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - ctx.start).count();
  json m{{"command", ctx.command},
         {"version", std::string(kVersion)},
         {"config", ctx.resolved},
         {"seed", ctx.resolved.value("seed", json(0))},
         {"threads", threads},
         {"outputs", ctx.outputs},
         {"started_at", ctx.started_at},
         {"wall_time_s", wall}};
  io::write_file((ctx.out / "manifest.json").string(), m.dump(2) + "\n");
}

json problem_json(const Problem& prob, const LoadReport& rep) {
  return json{{"domain", prob.domain.is_network() ? "network" : "planar"},
              {"measure", prob.domain.measure()},
              {"graph", prob.graph.descriptor()},
              {"edges", prob.inc.edges()},
              {"repair_edges", prob.graph.repair_edges},
              {"graph_notes", prob.graph.notes},
              {"points_read", rep.read},
              {"points_dropped", rep.dropped},
              {"points_snapped", rep.snapped},
              {"duplicates_dropped", rep.duplicates}};
}

// ---------------------------------------------------------------------------
// Commands

json resolve_run_config(const std::string& config_path, const json& overrides, bool need_lambda,
                        RunInputs& in) {
  json cfg = default_run_config();
  json file = load_config_file(config_path);
  if (!file.is_object()) throw ConfigError({"config root must be a JSON object"});
  cfg.merge_patch(file);
  cfg.merge_patch(overrides);
  Violations bad;
  const fs::path base = config_path.empty() ? fs::current_path() : fs::absolute(config_path).parent_path();
  absolutize(cfg, base, bad);
  in = build_inputs(cfg, need_lambda, std::move(bad));
  cfg["threads"] = in.fit.solver.threads;
  return cfg;
}

int cmd_fit(RunContext& ctx, const std::string& config, const json& overrides) {
  RunInputs in;
  ctx.resolved = resolve_run_config(config, overrides, true, in);
  const auto prob = make_problem(in.loaded.pattern, *in.domain, in.field, in.graph, in.quad);
  const auto f = fit(prob, *in.lambda, in.fit);
  json r = fit_json(f, prob.scheme);
  r["problem"] = problem_json(prob, in.loaded.report);
  ctx.write_json("result.json", r);
  ctx.write("coefficients.csv", coefficients_csv(f, prob.scheme));
  ctx.write("trace.csv", trace_csv(f.trace));
  ctx.write("scheme.csv", scheme_csv(prob.scheme));
  write_manifest(ctx, in.fit.solver.threads);
  std::cout << fit_summary_json(f, prob.scheme).dump() << "\n";
  return 0;
}

int cmd_path(RunContext& ctx, const std::string& config, const json& overrides) {
  RunInputs in;
  ctx.resolved = resolve_run_config(config, overrides, false, in);
  const auto prob = make_problem(in.loaded.pattern, *in.domain, in.field, in.graph, in.quad);
  const auto p = fit_path(prob, in.grid, in.path);
  json r = path_json(p, prob.scheme);
  r["problem"] = problem_json(prob, in.loaded.report);
  ctx.write_json("result.json", r);
  ctx.write("bic_table.csv", bic_table_csv(p));
  ctx.write("coefficients.csv", coefficients_csv(p.best(), prob.scheme));
  ctx.write("trace.csv", trace_csv(p.best().trace));
  ctx.write("scheme.csv", scheme_csv(prob.scheme));
  write_manifest(ctx, in.fit.solver.threads);
  std::cout << json{{"selected", p.selected}, {"lambda", p.lambdas[p.selected]}, {"bic", p.bic[p.selected]},
                    {"df", p.best().df()}}
                   .dump()
            << "\n";
  return 0;
}

int cmd_export_graph(RunContext& ctx, const std::string& config, const json& overrides) {
  RunInputs in;
  ctx.resolved = resolve_run_config(config, overrides, false, in);
  const auto prob = make_problem(in.loaded.pattern, *in.domain, in.field, in.graph, in.quad);
  ctx.write("graph.csv", graph_csv(prob.graph));
  ctx.write("scheme.csv", scheme_csv(prob.scheme));
  json g = problem_json(prob, in.loaded.report);
  g["vertices"] = prob.inc.vertices();
  g["components"] = component_count(connected_components(prob.inc.vertices(), prob.graph.edges));
  ctx.write_json("graph.json", g);
  write_manifest(ctx, in.fit.solver.threads);
  std::cout << g.dump() << "\n";
  return 0;
}

int cmd_simulate(RunContext& ctx, const std::string& config, const json& overrides) {
  json cfg = default_sim_config();
  json file = load_config_file(config);
  if (!file.is_object()) throw ConfigError({"config root must be a JSON object"});
  cfg.merge_patch(file);
  cfg.merge_patch(overrides);
  Violations bad;
  const long cells = get_or<long>(cfg, "", "eval_cells", 4096, bad);
  if (cells < 1) bad.add("eval_cells: must be >= 1");
  if (!bad.empty()) throw ConfigError(bad.items);
  const auto spec = scenario_from_json(cfg);
  ctx.resolved = scenario_json(spec);
  ctx.resolved["eval_cells"] = cells;

  const auto sc = make_scenario(spec);
  ctx.write("points.csv", pattern_csv(sc.pattern));
  ctx.write("truth.csv", truth_csv(sc, sc.domain.subdivide(static_cast<std::size_t>(cells))));

  json run = default_run_config();
  if (sc.domain.is_network()) {
    const auto [nodes, edges] = network_csv(sc.domain.network());
    ctx.write("nodes.csv", nodes);
    ctx.write("edges.csv", edges);
    run["domain"] = {{"type", "network"}, {"nodes", "nodes.csv"}, {"edges", "edges.csv"}};
    run["graph"]["method"] = "network_chain";
  } else {
    const auto& w = sc.domain.planar();
    const auto& b = w.bounds();
    run["domain"] = {{"type", "planar"}, {"bounds", {b.xmin, b.xmax, b.ymin, b.ymax}}, {"nx", w.nx()}, {"ny", w.ny()}};
  }
  for (const auto& c : sc.model.field.covariates()) {
    ctx.write(c.name + ".csv", csv_grid(c.raster));
    run["covariates"].push_back({{"name", c.name}, {"raster", c.name + ".csv"}});
  }
  run["points"] = "points.csv";
  run["quadrature"]["standardize"] = false;
  run["seed"] = spec.seed;
  run.erase("lambda");
  ctx.write_json("run.json", run);

  json info = ctx.resolved;
  info["n"] = sc.pattern.size();
  info["expected_n"] = sc.expected_n;
  info["intercept_shift"] = sc.model.shift;
  info["measure"] = sc.domain.measure();
  ctx.write_json("scenario.json", info);
  write_manifest(ctx, 1);
  std::cout << json{{"n", sc.pattern.size()}, {"expected_n", sc.expected_n}}.dump() << "\n";
  return 0;
}

// Nearest-row lookup of estimated coefficients (Euclidean on embedded
// coordinates) at every truth cell.
int cmd_evaluate(RunContext* ctx, const std::string& truth_path, const std::string& est_path,
                 std::string result_path) {
  const auto truth = io::read_csv(truth_path);
  const auto est = io::read_csv(est_path);
  auto col = [](const io::Table& t, const std::string& name) { return t.column(name); };
  for (const auto* t : {&truth, &est})
    require(col(*t, "x") >= 0 && col(*t, "y") >= 0, ErrorKind::parse, "evaluation files need x and y columns");

  std::vector<std::string> names;
  for (const auto& h : est.header)
    if (h.rfind("beta_", 0) == 0 && col(truth, h) >= 0) names.push_back(h.substr(5));
  require(!names.empty(), ErrorKind::parse, "truth and estimate share no beta_<name> columns");

  // Back-transform standardized estimates when the fit metadata is available.
  if (result_path.empty()) {
    const auto guess = fs::path(est_path).parent_path() / "result.json";
    if (fs::exists(guess)) result_path = guess.string();
  }
  std::map<std::string, std::pair<double, double>> scale;  // name -> (mean, sd)
  bool standardized = false;
  if (!result_path.empty()) {
    const json r = json::parse(io::read_file(result_path));
    const json& fit = r.contains("best") ? r["best"] : r;
    if (fit.contains("standardization") && fit["standardization"].value("enabled", false)) {
      standardized = true;
      const auto cn = fit.at("coefficients").get<std::vector<std::string>>();
      const auto mean = fit["standardization"].at("mean").get<std::vector<double>>();
      const auto sd = fit["standardization"].at("sd").get<std::vector<double>>();
      for (std::size_t k = 1; k < cn.size(); ++k) scale[cn[k]] = {mean[k - 1], sd[k - 1]};
    }
  }

  const std::size_t ne = est.rows.size();
  std::vector<Point2> pts(ne);
  std::vector<std::vector<double>> b(ne, std::vector<double>(names.size()));
  std::vector<std::vector<int>> lab(ne, std::vector<int>(names.size(), 0));
  for (std::size_t i = 0; i < ne; ++i) {
    const auto& row = est.rows[i];
    pts[i] = {io::parse_double(row[col(est, "x")]), io::parse_double(row[col(est, "y")])};
    for (std::size_t k = 0; k < names.size(); ++k) {
      b[i][k] = io::parse_double(row[col(est, "beta_" + names[k])]);
      const auto lc = col(est, "cluster_" + names[k]);
      if (lc >= 0) lab[i][k] = static_cast<int>(io::parse_int(row[lc]));
    }
    if (standardized) {
      // eta = b0 + sum b_k (z_k - m_k) / s_k
      for (std::size_t k = 0; k < names.size(); ++k)
        if (auto it = scale.find(names[k]); it != scale.end()) {
          b[i][k] /= it->second.second;
          const auto ic = std::find(names.begin(), names.end(), std::string("intercept"));
          if (ic != names.end()) b[i][static_cast<std::size_t>(ic - names.begin())] -= b[i][k] * it->second.first;
        }
    }
  }
  require(ne > 0, ErrorKind::parse, "estimate file has no rows");

  const auto mc = col(truth, "measure");
  const auto lr = col(truth, "log_rho");
  std::vector<double> sq(names.size(), 0.0);
  double total = 0.0, sq_rho = 0.0;
  bool have_rho = lr >= 0 && std::find(names.begin(), names.end(), std::string("intercept")) != names.end();
  std::vector<std::vector<int>> tl(names.size()), el(names.size());
  for (const auto& row : truth.rows) {
    const Point2 u{io::parse_double(row[col(truth, "x")]), io::parse_double(row[col(truth, "y")])};
    const double a = mc >= 0 ? io::parse_double(row[mc]) : 1.0;
    std::size_t best = 0;
    double bd = kInf;
    for (std::size_t i = 0; i < ne; ++i)
      if (const double d = euclidean(u, pts[i]); d < bd) {
        bd = d;
        best = i;
      }
    double eta = 0.0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      const double t = io::parse_double(row[col(truth, "beta_" + names[k])]);
      sq[k] += a * (t - b[best][k]) * (t - b[best][k]);
      if (names[k] == "intercept") {
        eta += b[best][k];
      } else if (const auto zc = col(truth, "z_" + names[k]); zc >= 0) {
        eta += b[best][k] * io::parse_double(row[zc]);
      } else {
        have_rho = false;
      }
      if (const auto tc = col(truth, "label_" + names[k]); tc >= 0) {
        tl[k].push_back(static_cast<int>(io::parse_int(row[tc])));
        el[k].push_back(lab[best][k]);
      }
    }
    if (have_rho) {
      const double d = io::parse_double(row[lr]) - eta;
      sq_rho += a * d * d;
    }
    total += a;
  }
  require(total > 0, ErrorKind::parse, "truth file has no cells");

  json out{{"cells", truth.rows.size()}, {"estimate_points", ne}, {"back_transformed", standardized}};
  json per = json::object();
  double all = 0.0, cov = 0.0;
  std::size_t ncov = 0;
  for (std::size_t k = 0; k < names.size(); ++k) {
    json e{{"mise", sq[k] / total}};
    if (tl[k].size() >= 2) e["rand_index"] = rand_index(tl[k], el[k]);
    per[names[k]] = e;
    all += sq[k] / total;
    if (names[k] != "intercept") {
      cov += sq[k] / total;
      ++ncov;
    }
  }
  out["coefficients"] = per;
  out["mise_beta"] = all / static_cast<double>(names.size());
  out["mise_covariates"] = ncov ? json(cov / static_cast<double>(ncov)) : json(nullptr);
  out["mise_log_rho"] = have_rho ? json(sq_rho / total) : json(nullptr);

  if (ctx) {
    ctx->resolved = {{"truth", fs::absolute(truth_path).string()},
                     {"est", fs::absolute(est_path).string()},
                     {"result", result_path.empty() ? json(nullptr) : json(fs::absolute(result_path).string())}};
    ctx->write_json("evaluation.json", out);
    write_manifest(*ctx, 1);
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

json error_record(const std::string& command, const std::exception& e) {
  json j{{"status", "error"}, {"command", command}, {"message", e.what()}};
  if (const auto* se = dynamic_cast<const Error*>(&e)) j["kind"] = std::string(to_string(se->kind()));
  else j["kind"] = "internal";
  if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) j["violations"] = ce->violations;
  return j;
}

int exit_code(const std::exception& e) {
  if (const auto* se = dynamic_cast<const Error*>(&e))
    return se->kind() == ErrorKind::config || se->kind() == ErrorKind::parse ? 2 : 1;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatially varying coefficient intensity models with graph fused lasso"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kVersion));

  std::string config, out;
  int threads = -1;
  long long seed = -1;
  double lambda = -1.0;
  std::string likelihood, graph_method, delta_mode;
  int k = -1, n_lambda = -1;
  long nd = -1;
  double target_n = -1.0;
  std::string scenario;
  std::string truth, est, result;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* c = sub->add_option("-c,--config", config, "JSON config file");
    if (needs_config) c->required()->check(CLI::ExistingFile);
    else c->check(CLI::ExistingFile);
    sub->add_option("-o,--out", out, "output directory")->required();
    sub->add_option("--seed", seed, "top-level seed (overrides config)");
  };
  auto add_run = [&](CLI::App* sub) {
    add_common(sub, true);
    sub->add_option("--threads", threads, "worker threads; 0 = SVCI_THREADS or all cores");
    sub->add_option("--likelihood", likelihood, "poisson | logistic");
    sub->add_option("--delta-mode", delta_mode, "constant | plugin");
    sub->add_option("--nd", nd, "dummy point target (0 = n)");
    sub->add_option("--graph", graph_method, "knn | rnn | delaunay | mst | network_chain");
    sub->add_option("-k,--k", k, "neighbours for knn / mst");
  };

  auto* sim = app.add_subcommand("simulate", "simulate a scenario and write data + truth");
  add_common(sim, false);
  sim->add_option("--scenario", scenario, "1 | 2a | 2b");
  sim->add_option("--n", target_n, "target expected count");

  auto* fit = app.add_subcommand("fit", "fit at one lambda");
  add_run(fit);
  fit->add_option("--lambda", lambda, "penalty level");

  auto* path = app.add_subcommand("path", "fit a lambda path and select by BIC");
  add_run(path);
  path->add_option("--n-lambda", n_lambda, "grid size for the automatic grid");

  auto* eval = app.add_subcommand("evaluate", "compare an estimate with a truth table");
  eval->add_option("--truth", truth, "truth CSV (from simulate)")->required()->check(CLI::ExistingFile);
  eval->add_option("--est", est, "coefficients CSV (from fit or path)")->required()->check(CLI::ExistingFile);
  eval->add_option("--result", result, "result.json with standardization metadata")->check(CLI::ExistingFile);
  eval->add_option("-o,--out", out, "optional output directory");

  auto* eg = app.add_subcommand("export-graph", "build and write the quadrature graph");
  add_run(eg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();

  json ov = json::object();
  if (seed >= 0) ov["seed"] = seed;
  if (threads >= 0) ov["threads"] = threads;
  if (command == "simulate") {
    if (!scenario.empty()) ov["scenario"] = scenario;
    if (target_n > 0) ov["target_n"] = target_n;
  } else {
    if (lambda > 0) ov["lambda"] = lambda;
    if (!likelihood.empty()) ov["quadrature"]["kind"] = likelihood;
    if (!delta_mode.empty()) ov["quadrature"]["delta_mode"] = delta_mode;
    if (nd >= 0) ov["quadrature"]["nd"] = nd;
    if (!graph_method.empty()) ov["graph"]["method"] = graph_method;
    if (k > 0) ov["graph"]["k"] = k;
    if (n_lambda > 0) ov["path"]["n_lambda"] = n_lambda;
  }

  RunContext ctx;
  ctx.command = command;
  ctx.started_at = utc_now();
  try {
    if (!out.empty()) {
      ctx.out = fs::path(out);
      fs::create_directories(ctx.out);
    }
    if (command == "simulate") return cmd_simulate(ctx, config, ov);
    if (command == "fit") return cmd_fit(ctx, config, ov);
    if (command == "path") return cmd_path(ctx, config, ov);
    if (command == "export-graph") return cmd_export_graph(ctx, config, ov);
    return cmd_evaluate(out.empty() ? nullptr : &ctx, truth, est, result);
  } catch (const std::exception& e) {
    const json rec = error_record(command, e);
    std::cerr << rec.dump() << "\n";
    if (!ctx.out.empty()) {
      try {
        io::write_file((ctx.out / "error.json").string(), rec.dump(2) + "\n");
      } catch (...) {
      }
    }
    return exit_code(e);
  }
}
