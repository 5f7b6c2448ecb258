// Acceptance suite: one PASS/FAIL line per criterion.
//   svci_acceptance [--only 1,2,...] [--cli PATH] [--work DIR]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "svci/svci.hpp"

using namespace svci;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Every fit produced here is checked again by criterion 4.
struct FitLog {
  std::size_t fits = 0, converged = 0, trace_violations = 0, fp_violations = 0;
  double worst_increase = 0.0, worst_fp = 0.0;

  void add(const FitResult& f) {
    ++fits;
    for (std::size_t i = 1; i < f.trace.size(); ++i) {
      const double inc = f.trace[i].objective - f.trace[i - 1].objective;
      worst_increase = std::max(worst_increase, inc);
      if (inc > 1e-10) ++trace_violations;
    }
    if (f.converged) {
      ++converged;
      worst_fp = std::max(worst_fp, f.fixed_point_residual);
      if (f.fixed_point_residual > 1e-5) ++fp_violations;
    }
  }
  void add(const PathResult& p) {
    for (const auto& f : p.fits) add(f);
  }
} fit_log;

// ---------------------------------------------------------------------------
// 1. Prox against an exact dual coordinate-descent solver.

// min 0.5 |r - H^T u|^2 over |u|_inf <= t, exact minimization one edge at a
// time. Returns b = r - H^T u once the duality gap is below gap_tol.
Eigen::VectorXd dual_cd_prox(const std::vector<Edge>& edges, const Eigen::VectorXd& r, double t, double& gap) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(Eigen::Index(edges.size()));
  Eigen::VectorXd b = r;
  auto primal = [&] {
    double s = 0.5 * (b - r).squaredNorm();
    for (const auto& e : edges) s += t * std::abs(b(e.i) - b(e.j));
    return s;
  };
  for (int sweep = 0; sweep < 2000000; ++sweep) {
    for (std::size_t l = 0; l < edges.size(); ++l) {
      const auto& e = edges[l];
      // b_i = r_i - sum u (into i) ...; moving u_l by d changes b_i by -d, b_j by +d
      const double d = (b(e.i) - b(e.j)) / 2.0;
      const double nu = std::clamp(u(Eigen::Index(l)) + d, -t, t);
      const double step = nu - u(Eigen::Index(l));
      u(Eigen::Index(l)) = nu;
      b(e.i) -= step;
      b(e.j) += step;
    }
    if (sweep % 50 == 49) {
      const double dual = 0.5 * r.squaredNorm() - 0.5 * b.squaredNorm();
      gap = primal() - dual;
      if (gap < 1e-14 * (1.0 + r.squaredNorm())) break;
    }
  }
  return b;
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  std::uniform_int_distribution<int> nv(2, 6), pp(0, 2);
  std::uniform_real_distribution<double> tt(0.0, 2.0);
  std::normal_distribution<double> nr(0.0, 1.5);
  double worst = 0.0, worst_gap = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const int m = nv(rng);
    std::vector<std::pair<int, int>> all;
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) all.emplace_back(i, j);
    std::shuffle(all.begin(), all.end(), rng);
    std::uniform_int_distribution<int> ne(1, std::min<int>(8, int(all.size())));
    const int e = ne(rng);
    SpatialGraph g;
    g.vertices = std::size_t(m);
    for (int l = 0; l < e; ++l) g.edges.push_back({all[std::size_t(l)].first, all[std::size_t(l)].second, 1.0});
    g.edges = canonical_edges(g.edges);
    Incidence inc(g);
    const int p = pp(rng);
    Coefficients r(m, p + 1);
    for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = nr(rng);
    // round some entries so ties and exact fusion occur
    if (rep % 3 == 0) r = (r.array() * 2.0).round() / 2.0;
    const double t = rep % 20 == 0 ? 0.0 : tt(rng);
    ProxWorkspace ws;
    const Coefficients out = fused_prox(r, inc, t, ws);
    for (Eigen::Index k = 0; k <= p; ++k) {
      double gap = 0.0;
      const Eigen::VectorXd ref = t == 0.0 ? Eigen::VectorXd(r.col(k)) : dual_cd_prox(g.edges, r.col(k), t, gap);
      worst_gap = std::max(worst_gap, gap);
      worst = std::max(worst, (out.col(k) - ref).cwiseAbs().maxCoeff());
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-4 && secs < 60.0,
          fmt("max sup-norm deviation %.2e over 200 graphs (oracle duality gap <= %.1e), %.1f s", worst, worst_gap,
              secs)};
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradients.

Outcome criterion2() {
  std::mt19937_64 rng(1002);
  std::uniform_int_distribution<int> mm(2, 40), pp(0, 3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> nrm(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const auto kind = rep % 2 ? LikelihoodKind::logistic : LikelihoodKind::poisson;
    const int m = mm(rng), p = pp(rng);
    QuadratureScheme q;
    q.kind = kind;
    q.measure = 0.5 + 3.0 * u(rng);
    q.design.resize(m, p + 1);
    q.weights.resize(m);
    q.responses = Eigen::VectorXd::Zero(m);
    q.baseline.resize(m);
    for (int i = 0; i < m; ++i) {
      const bool obs = i == 0 || u(rng) < 0.4;
      q.points.push_back({u(rng), u(rng), -1, 0.0});
      q.observed.push_back(obs);
      q.design(i, 0) = 1.0;
      for (int k = 1; k <= p; ++k) q.design(i, k) = nrm(rng);
      q.weights(i) = q.measure / m * (0.5 + u(rng));
      q.baseline(i) = 0.5 + 3.0 * u(rng);
      if (obs) q.responses(i) = 1.0 / q.weights(i);
      obs ? ++q.n : ++q.nd;
    }
    Coefficients b(m, p + 1);
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = 0.8 * nrm(rng);
    const Coefficients g = gradient(q, b);
    Coefficients fd(m, p + 1);
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < b.rows(); ++i)
      for (Eigen::Index k = 0; k < b.cols(); ++k) {
        Coefficients a = b, c = b;
        a(i, k) += h;
        c(i, k) -= h;
        fd(i, k) = (negll(q, a) - negll(q, c)) / (2.0 * h);
      }
    worst = std::max(worst, (g - fd).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-6, fmt("max relative error %.2e (max |g - fd| / max |g|, h = 1e-5, 50 instances)", worst)};
}

// ---------------------------------------------------------------------------
// 3. Full fusion.

LinearNetwork street_grid(int g) {
  std::vector<Point2> v;
  std::vector<std::pair<int, int>> e;
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) v.push_back({double(i), double(j)});
  for (int j = 0; j <= g; ++j)
    for (int i = 0; i <= g; ++i) {
      const int a = j * (g + 1) + i;
      if (i < g) e.emplace_back(a, a + 1);
      if (j < g) e.emplace_back(a, a + g + 1);
    }
  return LinearNetwork(std::move(v), e);
}

Outcome criterion3() {
  std::mt19937_64 rng(1003);
  std::uniform_real_distribution<double> rate(20.0, 200.0);
  double worst = 0.0;
  int multi = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const bool net = rep % 2 == 1;
    const Domain d = net ? Domain(street_grid(2 + rep % 3)) : Domain(PlanarWindow(Rect{0, 2, 0, 1}, 20, 10));
    const double c = rate(rng) / (net ? 10.0 : 1.0);
    const auto pat = simulate_homogeneous(d, c, std::uint64_t(rep));
    if (pat.size() < 2) continue;
    GraphSpec gs;
    gs.method = net ? GraphMethod::network_chain : GraphMethod::knn;
    QuadratureSpec qs;
    const auto prob = make_problem(pat, d, {}, gs, qs);
    const double lm = lambda_max(prob.scheme, prob.inc);
    const double expect = std::log(double(prob.scheme.n) / prob.scheme.measure);
    for (double mult : {1.0, 10.0}) {
      const auto f = fit(prob, lm * mult);
      fit_log.add(f);
      worst = std::max(worst, (f.beta.col(0).array() - expect).abs().maxCoeff());
      if (f.cluster_counts[0] != 1) ++multi;
    }
  }
  return {worst <= 1e-4 && multi == 0,
          fmt("max |beta0 - log(n/|D|)| = %.2e over 20 patterns at lambda_max and 10 lambda_max; %g fits not fused",
              worst, double(multi))};
}

// ---------------------------------------------------------------------------
// 5. Quadrature mass.

Outcome criterion5() {
  std::mt19937_64 rng(1005);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    std::unique_ptr<Domain> d;
    if (rep % 2 == 0) {
      const int nx = 10 + rep, ny = 8 + rep / 2;
      std::vector<std::uint8_t> mask(std::size_t(nx * ny));
      for (auto& m : mask) m = u(rng) < 0.6;
      mask[0] = 1;
      d = std::make_unique<Domain>(PlanarWindow(Rect{-1, 1 + 3 * u(rng), 0, 1 + 2 * u(rng)}, nx, ny, mask));
    } else {
      std::vector<Point2> v;
      std::vector<std::pair<int, int>> e;
      const int nv = 4 + rep / 3;
      for (int i = 0; i < nv; ++i) v.push_back({5 * u(rng), 5 * u(rng)});
      for (int i = 1; i < nv; ++i) e.emplace_back(std::uniform_int_distribution<int>(0, i - 1)(rng), i);
      d = std::make_unique<Domain>(LinearNetwork(std::move(v), e));
    }
    const auto pat = simulate_homogeneous(*d, 40.0 / d->measure(), std::uint64_t(rep));
    for (auto kind : {LikelihoodKind::poisson}) {
      QuadratureSpec qs;
      qs.kind = kind;
      qs.nd = std::size_t(30 + 11 * rep);
      const auto q = build_scheme(pat, *d, {}, qs);
      worst = std::max(worst, std::abs(q.weights.sum() - d->measure()) / d->measure());
    }
  }
  return {worst <= 1e-9, fmt("max relative |sum v - |D|| = %.2e over 25 masked windows and 25 networks", worst)};
}

// ---------------------------------------------------------------------------
// Scenario fits.

struct ScenarioFit {
  double mise_log_rho = 0.0;
  std::vector<double> rand;  // per covariate
  std::size_t n = 0;
  PathResult path;
};

ScenarioFit fit_scenario(const ScenarioSpec& sp, LikelihoodKind kind, std::size_t n_lambda, std::size_t eval_cells) {
  const auto sc = make_scenario(sp);
  GraphSpec gs;
  gs.method = sc.domain.is_network() ? GraphMethod::network_chain : GraphMethod::knn;
  gs.k = 5;
  QuadratureSpec qs;
  qs.kind = kind;
  qs.standardize = false;
  qs.seed = derive_seed(sp.seed, "quadrature");
  const auto prob = make_problem(sc.pattern, sc.domain, sc.model.field, gs, qs);
  PathOptions po;
  po.n_lambda = n_lambda;
  ScenarioFit out;
  out.n = sc.pattern.size();
  out.path = fit_path(prob, {}, po);
  fit_log.add(out.path);
  const auto& best = out.path.best();
  Predictor pr(prob.domain, prob.scheme, best.beta);
  const auto grid = sc.domain.subdivide(eval_cells);
  out.mise_log_rho = mise([&](const Location& u) { return Eigen::VectorXd::Constant(1, sc.model.log_rho(u)); },
                          [&](const Location& u) {
                            const auto b = pr.coefficients(u, 1);
                            return Eigen::VectorXd::Constant(1, *pr.log_intensity(u, b));
                          },
                          grid);
  for (std::size_t k = 1; k < best.labels.size(); ++k) {
    std::vector<int> truth;
    for (const auto& u : prob.scheme.points) truth.push_back(sc.model.surface.label(u, k));
    out.rand.push_back(rand_index(truth, best.labels[k]));
  }
  return out;
}

Outcome criterion6() {
  const auto t0 = std::chrono::steady_clock::now();
  double mp = 0, ml = 0, nbar = 0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    ScenarioSpec sp;
    sp.id = "2a";
    sp.target_n = 800;
    sp.seed = std::uint64_t(6000 + r);
    const auto fp = fit_scenario(sp, LikelihoodKind::poisson, PathOptions{}.n_lambda, 2000);
    const auto fl = fit_scenario(sp, LikelihoodKind::logistic, PathOptions{}.n_lambda, 2000);
    mp += fp.mise_log_rho / reps;
    ml += fl.mise_log_rho / reps;
    nbar += double(fp.n) / reps;
  }
  const double secs = seconds_since(t0);
  return {ml <= mp && ml <= 0.30 && mp <= 0.30 && secs <= 900.0,
          fmt("mean MISE_logrho logistic %.4f vs Poisson %.4f (mean n %.0f), %.0f s", ml, mp, nbar, secs)};
}

Outcome criterion7() {
  double m800 = 0, m2400 = 0;
  const int reps = 10;
  for (int r = 0; r < reps; ++r)
    for (double n : {800.0, 2400.0}) {
      ScenarioSpec sp;
      sp.id = "2a";
      sp.target_n = n;
      sp.seed = std::uint64_t(7000 + r);
      const auto f = fit_scenario(sp, LikelihoodKind::logistic, PathOptions{}.n_lambda, 2000);
      (n == 800.0 ? m800 : m2400) += f.mise_log_rho / reps;
    }
  return {m2400 < m800, fmt("scenario 2a logistic: mean MISE_logrho %.4f at n~800, %.4f at n~2400", m800, m2400)};
}

Outcome criterion8() {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> mean(2, 0.0);
  const int reps = 10;
  for (int r = 0; r < reps; ++r) {
    ScenarioSpec sp;
    sp.id = "1";
    sp.target_n = 1600;
    sp.seed = std::uint64_t(8000 + r);
    const auto f = fit_scenario(sp, LikelihoodKind::poisson, PathOptions{}.n_lambda, 2500);
    for (std::size_t k = 0; k < 2; ++k) mean[k] += f.rand[k] / reps;
  }
  return {mean[0] >= 0.75 && mean[1] >= 0.75,
          fmt("mean Rand index z1 %.3f, z2 %.3f over 10 replicates (%.0f s)", mean[0], mean[1], seconds_since(t0))};
}

Outcome criterion9() {
  ScenarioSpec sp;
  sp.id = "1";
  sp.target_n = 1600;
  sp.seed = 9000;
  const auto sc = make_scenario(sp);
  auto covs = sc.model.field.covariates();
  Covariate z3;
  z3.name = "z3";
  z3.source = Covariate::Source::raster;
  z3.raster = gp_raster(sc.domain.bounding_box(), sp.lattice, sp.lattice, sp.sigma2, sp.effective_phi(),
                        derive_seed(sp.seed, "z3"));
  covs.push_back(z3);
  GraphSpec gs;
  gs.k = 5;
  QuadratureSpec qs;
  qs.nd = sc.pattern.size();
  // lambda from a separate setup so only the fit itself is timed
  double lambda;
  {
    const auto prob = make_problem(sc.pattern, sc.domain, CovariateField(covs), gs, qs);
    lambda = 0.05 * lambda_max(prob.scheme, prob.inc);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto prob = make_problem(sc.pattern, sc.domain, CovariateField(covs), gs, qs);
  const double setup = seconds_since(t0);
  const auto f = fit(prob, lambda);
  const double total = seconds_since(t0);
  fit_log.add(f);
  return {total <= 30.0, fmt("n = %g, M = %g, p = 3: %.2f s (setup %.2f s)", double(sc.pattern.size()),
                             double(prob.scheme.size()), total, setup) +
                             (f.converged ? "" : " [fit hit the iteration cap]")};
}

Outcome criterion10() {
  const Domain planar = PlanarWindow(Rect{0, 3, 0, 2}, 30, 20);
  const Domain net = street_grid(4);
  std::string detail;
  bool ok = true;
  for (const Domain* d : {&planar, &net}) {
    const double c = 25.0;
    const double mean = c * d->measure();
    double total = 0;
    for (int s = 0; s < 200; ++s) total += double(simulate_homogeneous(*d, c, std::uint64_t(s)).size());
    const double avg = total / 200.0;
    const double band = 3.0 * std::sqrt(mean / 200.0);
    ok = ok && std::abs(avg - mean) <= band;
    if (!detail.empty()) detail += "; ";
    detail += (d->is_network() ? "network" : "planar") + fmt(" mean %.2f vs %.2f +- %.2f", avg, mean, band);
  }
  return {ok, detail};
}

// ---------------------------------------------------------------------------
// 11. CLI determinism.

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int run(const std::string& cmd) { return std::system((cmd + " > /dev/null 2>&1").c_str()); }

Outcome criterion11(const std::string& cli, const fs::path& work) {
  if (cli.empty() || !fs::exists(cli)) return {false, "CLI binary not found"};
  fs::remove_all(work);
  fs::create_directories(work);
  std::vector<std::string> compared;
  std::string mismatch;
  for (int pass = 0; pass < 2; ++pass) {
    const auto dir = work / ("run" + std::to_string(pass));
    const std::string sim = (dir / "sim").string();
    if (run(cli + " simulate --scenario 1 --n 400 --seed 5 -o " + sim) != 0) return {false, "simulate failed"};
    const std::string cfg = sim + "/run.json";
    if (run(cli + " path -c " + cfg + " --n-lambda 4 --threads 2 -o " + (dir / "path").string()) != 0)
      return {false, "path failed"};
    if (run(cli + " fit -c " + cfg + " --lambda 0.01 --threads 2 -o " + (dir / "fit").string()) != 0)
      return {false, "fit failed"};
    if (run(cli + " simulate --scenario 2a --n 300 --seed 5 -o " + (dir / "net").string()) != 0)
      return {false, "simulate 2a failed"};
    if (run(cli + " fit -c " + (dir / "net" / "run.json").string() + " --likelihood logistic --lambda 0.005 " +
            "--threads 1 -o " + (dir / "netfit").string()) != 0)
      return {false, "network fit failed"};
  }
  for (const auto& e : fs::recursive_directory_iterator(work / "run0")) {
    if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
    const auto rel = fs::relative(e.path(), work / "run0");
    compared.push_back(rel.string());
    if (slurp(e.path()) != slurp(work / "run1" / rel)) mismatch += rel.string() + " ";
  }
  return {mismatch.empty() && compared.size() >= 10,
          mismatch.empty() ? fmt("%g output files byte-identical across two runs (manifests excluded)",
                                 double(compared.size()))
                           : "differs: " + mismatch};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::string cli = SVCI_CLI_PATH;
  fs::path work = fs::temp_directory_path() / "svci_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else if (a == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (a == "--work" && i + 1 < argc) {
      work = argv[++i];
    }
  }
  auto wanted = [&](int c) { return only.empty() || only.count(c); };

  // criterion 4 reads the fits made by 3 and 6-9, so it runs last
  const std::vector<std::pair<int, std::function<Outcome()>>> order{
      {1, criterion1}, {2, criterion2}, {3, criterion3}, {5, criterion5}, {6, criterion6},
      {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10},
      {11, [&] { return criterion11(cli, work); }},
      {4, [] {
         return Outcome{fit_log.fits > 0 && fit_log.trace_violations == 0 && fit_log.fp_violations == 0,
                        fmt("%g fits: %g trace increases above 1e-10 (largest %.1e); max fixed-point residual %.1e",
                            double(fit_log.fits), double(fit_log.trace_violations), fit_log.worst_increase,
                            fit_log.worst_fp) +
                            fmt(" over %g converged fits; %g stopped at the iteration cap", double(fit_log.converged),
                                double(fit_log.fits - fit_log.converged))};
       }}};

  int failed = 0;
  for (const auto& [id, fn] : order) {
    if (!wanted(id)) continue;
    if (id == 4 && fit_log.fits == 0) {
      // standalone run: produce fits first
      criterion3();
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("criterion %2d: %s | %s | %.1f s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), seconds_since(t0));
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
