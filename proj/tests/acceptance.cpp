// Acceptance suite: one PASS/FAIL line per criterion; exit status is the
// number of failing criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "dynmatch/costbenefit.hpp"
#include "dynmatch/diagnostics.hpp"
#include "dynmatch/pipeline.hpp"
#include "dynmatch/propensity.hpp"
#include "dynmatch/text.hpp"
#include "dynmatch/validation.hpp"

using namespace dynmatch;
namespace fs = std::filesystem;

namespace {

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

template <typename F>
CheckResult timed(std::string name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  CheckResult r;
  r.name = std::move(name);
  try {
    body(r);
  } catch (const std::exception& e) {
    r.pass = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// Collects sub-checks and their failures into one detail string.
struct Tally {
  bool pass = true;
  std::vector<std::string> notes;
  void check(bool ok, const std::string& what) {
    pass = pass && ok;
    if (!ok) notes.push_back("failed: " + what);
  }
  void note(const std::string& s) { notes.push_back(s); }
  void finish(CheckResult& r) const {
    r.pass = pass;
    for (std::size_t i = 0; i < notes.size(); ++i) r.detail += (i ? "; " : "") + notes[i];
  }
};

Worker make_worker(const std::string& id, std::optional<int> enroll) {
  Worker w;
  w.id = id;
  w.enroll_quarter = enroll;
  return w;
}

CheckResult stated_arithmetic() {
  return timed("stated arithmetic", [](CheckResult& r) {
    Tally t;
    const double bcr_p = benefit_cost_ratio(37056, 6121), bcr_s = benefit_cost_ratio(49408, 20217);
    t.check(std::abs(bcr_p - 6.05) <= 0.01, "private ratio 6.05");
    t.check(std::abs(bcr_s - 2.44) <= 0.01, "social ratio 2.44");
    t.note(fmt("ratios %.4f / %.4f", bcr_p, bcr_s));

    const auto holm = holm_adjust(std::vector<double>{0.01, 0.04, 0.03});
    const std::vector<double> expect{0.03, 0.06, 0.06};
    for (std::size_t i = 0; i < 3; ++i) t.check(std::abs(holm[i] - expect[i]) <= 1e-15, "holm example");

    const std::vector<double> y{10, 7, 4, 5};
    MatchSet one, two;
    one.pairs = {{0, 1, 0.0, 1, 1.0}};
    two.pairs = {{0, 1, 0.0, 1, 1.0}, {2, 3, 0.0, 1, 1.0}};
    const auto d1 = match_difference(one, y), d2 = match_difference(two, y);
    t.check(d1.mean == 3.0 && !d1.variance, "single pair (10, 7)");
    t.check(d2.mean == 1.0 && d2.variance && *d2.variance == 4.0, "pairs (10, 7), (4, 5)");

    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0, 1);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const double de = 2000 * u(rng) - 500, dw = 3 * u(rng) - 1, en = 3000 + 4000 * u(rng), wn = 5 + 5 * u(rng);
      const auto m = extensive_margin_decomposition(de, dw, en, wn, 0.5 * u(rng));
      worst = std::max(worst, std::abs(m.weeks_term + m.rate_term + m.adjust_term - de) / std::max(1.0, std::abs(de)));
    }
    t.check(worst <= 1e-12, "extensive-margin identity");
    t.note(fmt("extensive margin max rel err %.1e", worst));

    // Industry decomposition on random employment histories.
    PanelDataset data;
    data.window_length = 1;
    std::uniform_int_distribution<int> ind(1, 5);
    std::uniform_real_distribution<double> earn(0, 9000);
    std::bernoulli_distribution employed(0.7), done(0.4);
    std::vector<AlignedMember> group;
    IndexList enrollees;
    for (int i = 0; i < 500; ++i) {
      auto w = make_worker("w" + std::to_string(i), 1);
      QuarterSeries code;
      for (int q = 0; q <= 12; ++q) {
        const bool e = q == 0 || employed(rng);
        w.earnings.set(q, e ? earn(rng) : 0.0);
        if (e) code.set(q, ind(rng));
      }
      w.aux["industry"] = code;
      w.completer = done(rng);
      data.workers.push_back(w);
      group.push_back({static_cast<WorkerIndex>(i), 1, 1.0 + static_cast<double>(i % 4)});
      enrollees.push_back(static_cast<WorkerIndex>(i));
    }
    double ind_err = 0.0, comp_err = 0.0;
    for (const auto& c : industry_switch_decomposition(data, group, "industry", 0, 11))
      ind_err = std::max(ind_err, std::abs(c.same + c.diff - c.total) / c.total);
    for (const auto& c : completer_decomposition(data, enrollees, 0, 11))
      comp_err = std::max(comp_err, std::abs(c.completer + c.noncompleter - c.total) / c.total);
    t.check(ind_err <= 1e-12, "industry decomposition additivity");
    t.check(comp_err <= 1e-12, "completer decomposition additivity");
    t.note(fmt("decomposition max rel err %.1e / %.1e", ind_err, comp_err));
    t.finish(r);
  });
}

CheckResult irr_solver() {
  return timed("IRR solver", [](CheckResult& r) {
    Tally t;
    const double a = irr(std::vector<double>{-100, 0, 121}).rate, b = irr(std::vector<double>{-100, 110}).rate;
    t.check(std::abs(a - 0.1) <= 1e-12, "[-100, 0, 121] -> 10%");
    t.check(std::abs(b - 0.1) <= 1e-12, "[-100, 110] -> 10%");
    std::mt19937_64 rng(50);
    std::uniform_real_distribution<double> u(0, 1);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      const double principal = 100 + 9900 * u(rng);
      std::vector<double> flow{-principal};
      const int outlays = static_cast<int>(3 * u(rng));
      const int years = 1 + static_cast<int>(39 * u(rng));
      for (int y = 0; y < outlays; ++y) flow.push_back(-principal * u(rng));
      for (int y = 0; y < years; ++y) flow.push_back(principal * (0.6 * u(rng) - 0.05));
      if (flow.back() <= 0) flow.back() = principal * 0.1;
      const double rate = irr(flow).rate;
      worst = std::max(worst, std::abs(npv_from_zero<double>(flow, rate)) / principal);
    }
    t.check(worst <= 1e-6, "npv(irr) on 50 streams");
    t.note(fmt("textbook %.15f / %.15f; max |npv|/principal %.1e", a, b, worst));
    t.finish(r);
  });
}

double loglik(const MatrixXd& X, const VectorXd& y, const VectorXd& b) {
  double ll = 0;
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const double eta = b(0) + X.row(i).dot(b.tail(X.cols()));
    ll += y(i) * eta - (eta > 0 ? eta + std::log1p(std::exp(-eta)) : std::log1p(std::exp(eta)));
  }
  return ll;
}

// Coordinate grid search whose spacing halves until 1e-10.
VectorXd grid_mle(const MatrixXd& X, const VectorXd& y) {
  VectorXd b = VectorXd::Zero(X.cols() + 1);
  double best = loglik(X, y, b);
  for (double step = 1.0; step > 1e-10;) {
    bool improved = false;
    for (Eigen::Index j = 0; j < b.size(); ++j)
      for (double dir : {1.0, -1.0}) {
        VectorXd c = b;
        c(j) += dir * step;
        const double v = loglik(X, y, c);
        if (v > best) best = v, b = c, improved = true;
      }
    if (!improved) step /= 2;
  }
  return b;
}

CheckResult logit() {
  return timed("logit", [](CheckResult& r) {
    Tally t;
    MatrixXd X0(8, 0);
    VectorXd y0(8);
    y0 << 1, 1, 1, 0, 0, 0, 0, 0;
    const auto f0 = fit_logit(X0, y0);
    t.check(f0.converged && std::abs(f0.intercept - std::log(0.375 / 0.625)) <= 1e-12, "intercept-only closed form");

    std::mt19937_64 rng(20);
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    double worst = 0.0;
    for (int rep = 0; rep < 10; ++rep) {
      MatrixXd X(20, 2);
      VectorXd y(20);
      for (int i = 0; i < 20; ++i) {
        double eta = 0.2;
        for (int j = 0; j < 2; ++j) {
          X(i, j) = z(rng) * (j + 1);
          eta += 0.5 * X(i, j) / (j + 1);
        }
        y(i) = u(rng) < inverse_logit(eta) ? 1.0 : 0.0;
      }
      const auto fit = fit_logit(X, y);
      if (!fit.converged || fit.separated) {
        --rep;  // separated draws have no finite oracle
        continue;
      }
      const VectorXd oracle = grid_mle(X, y);
      worst = std::max(worst, std::abs(fit.intercept - oracle(0)));
      for (int j = 0; j < 2; ++j) worst = std::max(worst, std::abs(fit.coefficients(j) - oracle(j + 1)));
    }
    t.check(worst <= 1e-5, "20-row fits vs grid oracle");
    t.note(fmt("max |coef diff| vs grid oracle %.1e", worst));

    MatrixXd Xs(10, 1);
    VectorXd ys(10);
    for (int i = 0; i < 10; ++i) Xs(i, 0) = i - 4.5, ys(i) = i >= 5;
    const auto sep = fit_logit(Xs, ys);
    t.check(sep.separated && !sep.converged, "separation flagged");

    MatrixXd X(150, 2);
    VectorXd y(150);
    for (int i = 0; i < 150; ++i) {
      X(i, 0) = z(rng);
      X(i, 1) = 2 * z(rng);
      y(i) = u(rng) < inverse_logit(0.3 + 0.5 * X(i, 0) - 0.25 * X(i, 1)) ? 1.0 : 0.0;
    }
    MatrixXd Xc(150, 3);
    Xc << X, X.col(0) + 2 * X.col(1);
    const auto fb = fit_with_fallback(Xc, y, {"c", "b", "a"}, {}, {"a", "b", "c"});
    const auto ref = fit_logit(X, y, {}, {"a", "b"});
    t.check(fb.converged && fb.dropped_covariates == std::vector<std::string>{"c"} &&
                (fb.scores - ref.scores).cwiseAbs().maxCoeff() < 1e-10,
            "collinear fallback drops one covariate");
    t.finish(r);
  });
}

std::string slurp(const fs::path& p) { return text::read_file(p.string()); }

CheckResult determinism(const fs::path& work) {
  return timed("determinism and monotone-transform invariance", [&](CheckResult& r) {
    Tally t;
    RunConfig sim;
    sim.command = Command::Simulate;
    sim.seed = 11;
    sim.sim.n_workers = 10000;
    sim.sim.S = 3;
    sim.sim.horizon = 8;
    sim.out = (work / "sim").string();
    std::ostringstream log;
    run(sim, log);

    auto estimate = [&](const std::string& dir) {
      RunConfig c;
      apply_config_file(c, (work / "sim" / "estimate.ini").string());
      c.command = Command::Estimate;
      c.estimands = {"lb", "ub", "nvl", "lechner", "ipw", "did"};
      c.tau_max = 8;
      c.bootstrap = 10;
      c.out = (work / dir).string();
      run(c, log);
    };
    estimate("run1");
    estimate("run2");
    for (const char* f : {"estimates.csv", "balance.csv", "overlap.csv", "interim.csv", "fits.json", "manifest.json"})
      t.check(slurp(work / "run1" / f) == slurp(work / "run2" / f), std::string("byte-identical ") + f);
    t.note(t.pass ? "two estimate runs byte-identical" : "estimate runs differ");

    // Pairings from nn_match on scores and on their log-odds.
    std::mt19937_64 rng(12);
    std::uniform_real_distribution<double> u(0.01, 0.99);
    int same = 0;
    const int datasets = 200;
    std::string example;
    for (int rep = 0; rep < datasets; ++rep) {
      std::vector<double> ts(30), cs(120), lt, lc;
      for (auto& v : ts) v = u(rng);
      for (auto& v : cs) v = u(rng);
      for (double v : ts) lt.push_back(log_odds(v));
      for (double v : cs) lc.push_back(log_odds(v));
      const auto a = nn_match(ts, cs), b = nn_match(lt, lc);
      bool equal = a.pairs.size() == b.pairs.size();
      for (std::size_t i = 0; equal && i < a.pairs.size(); ++i)
        equal = a.pairs[i].treated == b.pairs[i].treated && a.pairs[i].control == b.pairs[i].control;
      same += equal;
    }
    // Smallest case: log-odds stretches distances near 0 and 1 unequally.
    const std::vector<double> t1{0.3}, c1{0.2, 0.41};
    const auto raw = nn_match(t1, c1);
    const std::vector<double> lt1{log_odds(0.3)}, lc1{log_odds(0.2), log_odds(0.41)};
    const auto lo = nn_match(lt1, lc1);
    example = fmt("treated 0.3, controls {0.2, 0.41}: score scale picks %.2f, log-odds picks %.2f",
                  c1[raw.pairs[0].control], c1[lo.pairs[0].control]);
    t.check(same == datasets, "pairings invariant under log-odds");
    t.note(fmt("log-odds pairings identical in %d of %d random datasets; %s", same, datasets, example.c_str()));
    t.finish(r);
  });
}

CheckResult end_to_end(const fs::path& work) {
  return timed("end-to-end scale", [&](CheckResult& r) {
    std::ostringstream log;
    RunConfig sim;
    sim.command = Command::Simulate;
    sim.seed = 5;
    sim.sim.n_workers = 100000;
    sim.sim.S = 8;
    sim.sim.horizon = 16;
    sim.out = (work / "e2e_sim").string();
    run(sim, log);
    RunConfig c;
    apply_config_file(c, (work / "e2e_sim" / "estimate.ini").string());
    c.command = Command::Estimate;
    c.estimands = {"lb", "ub", "nvl"};
    c.tau_min = 0;
    c.tau_max = 16;
    c.out = (work / "e2e_est").string();
    run(c, log);
    std::ifstream in(work / "e2e_est" / "estimates.csv");
    std::string line;
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    const std::string fits = slurp(work / "e2e_est" / "fits.json");
    std::size_t nfits = 0;
    for (std::size_t p = fits.find("\"score_kind\""); p != std::string::npos; p = fits.find("\"score_kind\"", p + 1))
      ++nfits;
    r.detail = fmt("n = 100000, S = 8, %zu score fits, %d estimate rows; ", nfits, rows - 1) + log.str();
    if (!r.detail.empty() && r.detail.back() == '\n') r.detail.pop_back();
    r.pass = rows > 1 && nfits >= 8;
  });
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "dynmatch_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  std::vector<CheckResult> results;
  auto add = [&](CheckResult r, double limit_seconds) {
    if (r.seconds > limit_seconds) {
      r.pass = false;
      r.detail += fmt("; exceeded time limit %.0fs", limit_seconds);
    }
    std::vector<CheckResult> one{r};
    std::cout << results.size() + 1 << ". ";
    print_results(std::cout, one);
    std::cout.flush();
    results.push_back(std::move(r));
  };

  add(check_beta_grid(), 1);
  add(check_regression_recovery(1000000, 4, {1, 2, 4}, 2024), 60);
  add(check_point_identification(25, 77), 5);
  CoverageOptions cov;
  cov.reps = 200;
  cov.n = 20000;
  cov.seed = 1000;
  add(check_bound_coverage(cov), 600);
  add(check_collapse(21), 60);
  InterimOptions interim;
  interim.reps = 100;
  interim.seed = 5000;
  add(check_interim_sign(interim), 600);
  add(check_violation(), 5);
  add(stated_arithmetic(), 5);
  add(irr_solver(), 5);
  add(logit(), 30);
  add(determinism(work), 120);
  add(end_to_end(work), 300);

  int failed = 0;
  for (const auto& r : results) failed += !r.pass;
  std::cout << (results.size() - static_cast<std::size_t>(failed)) << " of " << results.size()
            << " criteria passed\n";
  return failed;
}
