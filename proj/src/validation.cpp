#include "dynmatch/validation.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "dynmatch/diagnostics.hpp"
#include "dynmatch/estimators.hpp"

namespace dynmatch {

namespace {

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

struct Moments {
  double n = 0, sum = 0, sum_sq = 0;
  void add(double v) {
    n += 1;
    sum += v;
    sum_sq += v * v;
  }
  double mean() const { return sum / n; }
  double sd() const {
    const double m = mean();
    return std::sqrt(std::max(0.0, (sum_sq - n * m * m) / (n - 1)));
  }
  double mc_se() const { return sd() / std::sqrt(n); }
};

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

}  // namespace

CheckResult check_beta_grid() {
  return timed("beta closed forms vs projection oracle", [](CheckResult& r) {
    const Sigmas sigma{0.7, 1.3, 0.4};
    double worst = 0.0;
    bool positive = true;
    int cases = 0;
    for (double rho : {0.1, 0.25, 0.5, 0.75, 0.9})
      for (int K : {0, 1, 4, 12})
        for (int t = 1; t <= 8; ++t) {
          const double ac = beta_ac(rho, sigma.omega, sigma.eps, sigma.upsilon, K, t);
          const double hr = beta_hr(rho, sigma.omega, sigma.eps, sigma.upsilon, K, t);
          worst = std::max(worst, std::abs(ac - projection_coefficients(rho, sigma, K, t, 1)(0)));
          worst = std::max(worst, std::abs(hr - projection_coefficients(rho, sigma, K, t, 2)(0)));
          positive = positive && ac > 0 && hr > 0;
          cases += 2;
        }
    r.pass = worst <= 1e-10 && positive;
    r.detail = fmt("%d coefficients, max |diff| %.2e, all positive: %s", cases, worst, positive ? "yes" : "no");
  });
}

CheckResult check_regression_recovery(std::size_t n, int K, const std::vector<int>& quarters, std::uint64_t seed) {
  return timed("regression recovery of beta_ac", [&](CheckResult& r) {
    SimConfig cfg;
    cfg.n_workers = n;
    cfg.sigma = {1.0, 1.0, 1.0};
    cfg.rho = 0.75;
    cfg.lambda = 0.0;
    cfg.K = K;
    cfg.d1_ybar = -1.0;
    cfg.truncate = false;
    cfg.seed = seed;
    int last = 2;
    for (int t : quarters) last = std::max(last, t);
    cfg.horizon = last - cfg.S;
    const auto lp = simulate_latent(cfg);
    // Units at risk in period 2; their selection at 1 depends on X^1 only.
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < lp.enroll.size(); ++i)
      if (lp.enroll[i] != 1) rows.push_back(static_cast<Eigen::Index>(i));
    const auto m = static_cast<Eigen::Index>(rows.size());
    MatrixXd X(m, K + 3);
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto i = static_cast<std::size_t>(rows[static_cast<std::size_t>(j)]);
      X(j, 0) = 1.0;
      X(j, 1) = lp.at(i, 1) + lp.upsilon(rows[static_cast<std::size_t>(j)], 1);
      for (int k = 0; k <= K; ++k) X(j, 2 + k) = lp.at(i, -K + k);
    }
    const MatrixXd xtx = X.transpose() * X;
    const Eigen::LDLT<MatrixXd> ldlt(xtx);
    const MatrixXd inv = ldlt.solve(MatrixXd::Identity(X.cols(), X.cols()));
    r.pass = true;
    std::ostringstream detail;
    detail << "n at risk " << m;
    for (int t : quarters) {
      VectorXd y(m);
      for (Eigen::Index j = 0; j < m; ++j) y(j) = lp.at(static_cast<std::size_t>(rows[static_cast<std::size_t>(j)]), t);
      const VectorXd b = ldlt.solve(X.transpose() * y);
      const VectorXd e = y - X * b;
      const double se = std::sqrt(inv(1, 1) * e.squaredNorm() / static_cast<double>(m - X.cols()));
      const double target = beta_ac(0.75, 1.0, 1.0, 1.0, K, t);
      const double z = (b(1) - target) / se;
      r.pass = r.pass && std::abs(z) <= 3.0;
      detail << fmt("; t=%d: %.5f vs %.5f (z %.2f)", t, b(1), target, z);
    }
    r.detail = detail.str();
  });
}

CheckResult check_point_identification(int populations, std::uint64_t seed) {
  return timed("point identification on exhaustive populations", [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    double worst = 0.0;
    int bracket_failures = 0;
    for (int rep = 0; rep < populations; ++rep) {
      const auto pop = random_population(rng);
      const auto data = population_panel(pop);
      const auto cells = partition_cells(data, {});
      const auto book = saturated_score_book(data, cells);
      EstimationContext ctx{data, cells, book, {1, TieMode::All}};
      const auto exact = enumerate_tot(pop, 1);
      const double robins = exact.treated_mean - robins_oracle(pop);
      const double lp = lechner_point(ctx, 1, 2).value;
      const auto ipw = ipw_counterfactual(ctx, 1, 2);
      const double ipw_tot = ipw.treated_mean - ipw.counterfactual;
      const double lb = tot_lower_bound(ctx, 1, 2).value;
      const double ub = tot_upper_bound(ctx, 1, 2, exact_share).value;
      for (double v : {std::abs(lp - robins), std::abs(ipw_tot - robins), std::abs(lp - ipw_tot),
                       std::abs(lb - exact.lower), std::abs(ub - exact.upper)})
        worst = std::max(worst, v);
      if (!(exact.lower <= robins && robins <= exact.upper)) ++bracket_failures;
    }
    r.pass = worst <= 1e-10 && bracket_failures == 0;
    r.detail = fmt("%d populations, max |diff| %.2e, bracket failures %d", populations, worst, bracket_failures);
  });
}

CheckResult check_bound_coverage(const CoverageOptions& opts) {
  return timed("bound coverage", [&](CheckResult& r) {
    int lb_ok = 0, ub_ok = 0;
    Moments lechner, truth;
    for (int rep = 0; rep < opts.reps; ++rep) {
      SimConfig cfg;
      cfg.n_workers = opts.n;
      cfg.S = 2;
      cfg.rho = opts.rho;
      cfg.alpha = opts.alpha;
      cfg.horizon = std::max(0, opts.quarter - cfg.S);
      cfg.seed = opts.seed + static_cast<std::uint64_t>(rep);
      auto [data, sim_truth] = simulate_panel(cfg);
      const auto cells = partition_cells(data, {});
      const auto book = fit_score_book(data, cells);
      EstimationContext ctx{data, cells, book};
      const double lb = tot_lower_bound(ctx, 1, opts.quarter).value;
      const double ub = tot_upper_bound(ctx, 1, opts.quarter).value;
      lechner.add(lechner_point(ctx, 1, opts.quarter).value);
      truth.add(sim_truth.delta.at({1, opts.quarter - 1}));
      lb_ok += lb <= opts.alpha;
      ub_ok += ub >= opts.alpha;
    }
    const double reps = opts.reps;
    const double f_lb = lb_ok / reps, f_ub = ub_ok / reps;
    const double z = (lechner.mean() - opts.alpha) / lechner.mc_se();
    r.pass = f_lb >= 0.95 && f_ub >= 0.95 && std::abs(z) <= 2.0;
    r.detail = fmt("%d reps: P(lb<=%.0f)=%.3f P(ub>=%.0f)=%.3f lechner mean %.2f (z %.2f, per-replication sd %.1f); "
                   "mean sample truth %.2f",
                   opts.reps, opts.alpha, f_lb, opts.alpha, f_ub, lechner.mean(), z, lechner.sd(), truth.mean());
  });
}

CheckResult check_collapse(std::uint64_t seed) {
  return timed("collapse without later enrollees", [&](CheckResult& r) {
    SimConfig cfg;
    cfg.n_workers = 4000;
    cfg.K = 2;
    cfg.horizon = 4;
    cfg.ybar = {-1e9};
    cfg.seed = seed;
    auto [data, truth] = simulate_panel(cfg);
    if (!data.enrollees(2).empty()) throw DomainError("collapse fixture has later enrollees");
    const auto cells = partition_cells(data, {});
    const auto book = fit_score_book(data, cells);
    EstimationContext ctx{data, cells, book};
    auto same = [](double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; };
    int equal = 0, total = 0;
    for (int t = 1; t <= 6; ++t) {
      const double lb = tot_lower_bound(ctx, 1, t).value;
      const double ub = tot_upper_bound(ctx, 1, t).value;
      const double lp = lechner_point(ctx, 1, t).value;
      const double nvl = now_vs_later(ctx, 1, t).value;
      ++total;
      equal += same(lb, ub) && same(lb, lp) && same(lb, nvl) && !is_missing(lb);
    }
    r.pass = equal == total;
    r.detail = fmt("%d of %d quarters bitwise equal", equal, total);
  });
}

namespace {

// Aggregated interim differentials keyed by (lag, quarter).
std::map<std::pair<int, int>, double> interim_rows(const SimConfig& cfg) {
  auto [data, truth] = simulate_panel(cfg);
  const auto cells = partition_cells(data, {});
  const auto book = fit_score_book(data, cells);
  EstimationContext ctx{data, cells, book};
  std::vector<InterimDifferential> parts;
  for (int s = 1; s < cfg.S; ++s)
    for (int l = 1; s + l <= cfg.S; ++l)
      if (auto p = assumption2_test(ctx, s, l)) parts.insert(parts.end(), p->begin(), p->end());
  std::map<std::pair<int, int>, double> out;
  for (const auto& a : aggregate_interim(parts)) out[{a.lag, a.quarter}] = a.value;
  return out;
}

}  // namespace

CheckResult check_interim_sign(const InterimOptions& opts) {
  return timed("later-enrollee interim differential sign", [&](CheckResult& r) {
    r.pass = true;
    std::ostringstream detail;
    for (SelectionRule rule : {SelectionRule::AC, SelectionRule::HR}) {
      std::map<std::pair<int, int>, int> negative;
      for (int s = 1; s < opts.S; ++s)
        for (int l = 1; s + l <= opts.S; ++l)
          for (int q = 1; q <= l; ++q) negative[{l, q}] = 0;
      for (int rep = 0; rep < opts.reps; ++rep) {
        SimConfig cfg;
        cfg.n_workers = opts.n;
        cfg.S = opts.S;
        cfg.rule = rule;
        cfg.horizon = 0;
        cfg.seed = opts.seed + static_cast<std::uint64_t>(rep);
        for (const auto& [key, v] : interim_rows(cfg)) negative[key] += v < 0;
      }
      detail << (rule == SelectionRule::AC ? "AC" : "HR");
      for (const auto& [key, count] : negative) {
        const double f = count / static_cast<double>(opts.reps);
        r.pass = r.pass && f >= 0.95;
        detail << fmt(" (l%d,q%d) %.2f", key.first, key.second, f);
      }
      detail << "; ";
    }
    Moments indep;
    for (int rep = 0; rep < opts.reps; ++rep) {
      SimConfig cfg;
      cfg.n_workers = opts.n;
      cfg.S = 2;
      cfg.K = 2;
      cfg.rho = 0.0;
      cfg.sigma.omega = 0.0;
      cfg.k = cfg.S + cfg.K + 1;  // selection quarter before the covariate window
      cfg.horizon = 0;
      cfg.seed = opts.seed + 100000 + static_cast<std::uint64_t>(rep);
      const auto rows = interim_rows(cfg);
      indep.add(rows.at({1, 1}));
    }
    const double z = indep.mean() / indep.mc_se();
    r.pass = r.pass && std::abs(z) <= 2.0;
    detail << fmt("independence mean %.2f (z %.2f)", indep.mean(), z);
    r.detail = detail.str();
  });
}

DiscretePopulation violating_population() {
  // One baseline pattern. Among the not-yet-enrolled, high interim earnings
  // (1500) lead to later enrollment far more often than low (500), and the
  // interim type carries the outcome level. Within each interim type later-
  // and never-enrollees share the outcome distribution, and the enrollees'
  // untreated outcomes follow the not-enrolled distribution.
  DiscretePopulation pop;
  auto add = [&](int enroll, double y1, double y00, double effect, std::size_t count) {
    pop.rows.push_back({1000.0, enroll, y1, y00 + effect, y00, count});
  };
  for (double y00 : {400.0, 600.0}) {
    add(1, 500, y00, 500, 25);
    add(2, 500, y00, 500, 5);
    add(0, 500, y00, 0, 45);
  }
  for (double y00 : {1400.0, 1600.0}) {
    add(1, 1500, y00, 500, 25);
    add(2, 1500, y00, 500, 25);
    add(0, 1500, y00, 0, 25);
  }
  return pop;
}

CheckResult check_violation() {
  return timed("violating population is detected", [](CheckResult& r) {
    const auto pop = violating_population();
    const auto exact = enumerate_tot(pop, 1);
    const auto data = population_panel(pop);
    const auto cells = partition_cells(data, {});
    const auto book = saturated_score_book(data, cells);
    EstimationContext ctx{data, cells, book, {1, TieMode::All}};
    const double lb = tot_lower_bound(ctx, 1, 2).value;
    const auto test = assumption2_test(ctx, 1, 1);
    if (!test || test->empty()) throw DomainError("no later-enrollee differential");
    const auto& d = test->front();
    const double z = d.value / d.se;
    r.pass = lb > exact.truth && exact.lower > exact.truth && d.value > 0 && z > 0;
    r.detail = fmt("truth %.2f, lower bound %.2f (population %.2f), interim differential %.2f (z %.2f)", exact.truth,
                   lb, exact.lower, d.value, z);
  });
}

void print_results(std::ostream& out, const std::vector<CheckResult>& results) {
  for (const auto& r : results)
    out << (r.pass ? "PASS" : "FAIL") << "  " << r.name << fmt("  (%.2fs)  ", r.seconds) << r.detail << '\n';
}

}  // namespace dynmatch
