#include <doctest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "dynmatch/diagnostics.hpp"
#include "dynmatch/simulation.hpp"

using namespace dynmatch;

namespace {

Worker worker(const std::string& id, std::optional<int> enroll, std::vector<std::pair<int, double>> y) {
  Worker w;
  w.id = id;
  w.enroll_quarter = enroll;
  for (auto [q, v] : y) w.earnings.set(q, v);
  return w;
}

// Step-down Holm straight from the definition.
std::vector<double> holm_reference(const std::vector<double>& p) {
  const std::size_t m = p.size();
  std::vector<double> out(m);
  for (std::size_t i = 0; i < m; ++i) {
    double best = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (p[j] > p[i] || (p[j] == p[i] && j > i)) continue;
      std::size_t rank = 0;  // number of p-values ordered before j
      for (std::size_t q = 0; q < m; ++q) rank += p[q] < p[j] || (p[q] == p[j] && q < j);
      best = std::max(best, std::min(1.0, static_cast<double>(m - rank) * p[j]));
    }
    out[i] = best;
  }
  return out;
}

}  // namespace

TEST_CASE("normalized difference") {
  CHECK(normalized_difference(2.0, 2.0, 1.0, 3.0) == 0.0);
  CHECK(normalized_difference(1.0, 0.0, 1.0, 1.0) == 1.0);
  CHECK(normalized_difference(3.0, 3.0, 0.0, 0.0) == 0.0);
  CHECK(std::isinf(normalized_difference(3.0, 1.0, 0.0, 0.0)));
  CHECK(normalized_difference(1.0, 3.0, 0.0, 0.0) < 0);
}

TEST_CASE("balance") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0, 1);
  MatrixXd t(40, 2), c(70, 2);
  for (Eigen::Index i = 0; i < t.rows(); ++i) t(i, 0) = 1 + z(rng), t(i, 1) = 3 * z(rng);
  for (Eigen::Index i = 0; i < c.rows(); ++i) c(i, 0) = z(rng), c(i, 1) = 2 * z(rng);
  const std::vector<std::string> cols{"a", "b"};

  SUBCASE("identical groups") {
    const auto r = balance(cols, t, VectorXd::Ones(40), t, VectorXd::Ones(40), BalanceSample::Raw);
    for (const auto& b : r.rows) {
      CHECK(b.normalized_difference == 0.0);
      CHECK(b.t_statistic == 0.0);
    }
  }
  SUBCASE("direct formula") {
    const auto r = balance(cols, t, VectorXd::Ones(40), c, VectorXd::Ones(70), BalanceSample::Raw);
    for (Eigen::Index j = 0; j < 2; ++j) {
      const double mt = t.col(j).mean(), mc = c.col(j).mean();
      const double vt = (t.col(j).array() - mt).square().sum() / 39.0;
      const double vc = (c.col(j).array() - mc).square().sum() / 69.0;
      const auto& b = r.rows[static_cast<std::size_t>(j)];
      CHECK(b.normalized_difference == doctest::Approx((mt - mc) / std::sqrt((vt + vc) / 2)).epsilon(1e-12));
      CHECK(b.t_statistic == doctest::Approx((mt - mc) / std::sqrt(vt / 40 + vc / 70)).epsilon(1e-12));
      CHECK(b.sd_control == doctest::Approx(std::sqrt(vc)).epsilon(1e-12));
    }
  }
  SUBCASE("integer weights equal duplicated rows") {
    VectorXd w = VectorXd::Ones(70);
    w(3) = 3;
    w(10) = 2;
    MatrixXd dup(73, 2);
    dup.topRows(70) = c;
    dup.row(70) = c.row(3);
    dup.row(71) = c.row(3);
    dup.row(72) = c.row(10);
    const auto a = balance(cols, t, VectorXd::Ones(40), c, w, BalanceSample::Matched);
    const auto b = balance(cols, t, VectorXd::Ones(40), dup, VectorXd::Ones(73), BalanceSample::Matched);
    for (std::size_t j = 0; j < 2; ++j)
      CHECK(a.rows[j].normalized_difference == doctest::Approx(b.rows[j].normalized_difference).epsilon(1e-12));
  }
}

TEST_CASE("matching improves balance on confounded panels") {
  int better = 0;
  const int reps = 20;
  for (int rep = 0; rep < reps; ++rep) {
    SimConfig cfg;
    cfg.n_workers = 10000;
    cfg.K = 2;
    cfg.horizon = 1;
    cfg.seed = 300 + static_cast<std::uint64_t>(rep);
    auto [data, truth] = simulate_panel(cfg);
    auto cells = partition_cells(data, {});
    auto book = fit_score_book(data, cells);
    EstimationContext ctx{data, cells, book};
    const auto m = match_cohort(ctx, 1, ComparisonPool::Never).matches;
    better += balance_matched(data, m).mean_abs_difference() < balance_raw(data, 1).mean_abs_difference();
  }
  CHECK(better >= 19);
}

TEST_CASE("later-enrollee interim differentials") {
  SUBCASE("negative under lagged-earnings selection") {
    SimConfig cfg;
    cfg.n_workers = 10000;
    cfg.K = 2;
    cfg.horizon = 1;
    cfg.seed = 71;
    auto [data, truth] = simulate_panel(cfg);
    auto cells = partition_cells(data, {});
    auto book = fit_score_book(data, cells);
    EstimationContext ctx{data, cells, book};
    auto r = assumption2_test(ctx, 1, 1);
    REQUIRE(r);
    REQUIRE(r->size() == 1);
    CHECK((*r)[0].value < 0);
    CHECK((*r)[0].value / (*r)[0].se < -2);
  }
  SUBCASE("every interim quarter is reported") {
    SimConfig cfg;
    cfg.n_workers = 10000;
    cfg.S = 4;
    cfg.K = 2;
    cfg.horizon = 1;
    cfg.seed = 72;
    auto [data, truth] = simulate_panel(cfg);
    auto cells = partition_cells(data, {});
    auto book = fit_score_book(data, cells);
    EstimationContext ctx{data, cells, book};
    std::vector<InterimDifferential> parts;
    for (int s = 1; s <= 2; ++s) {
      auto r = assumption2_test(ctx, s, 2);
      REQUIRE(r);
      CHECK(r->size() == 2);
      parts.insert(parts.end(), r->begin(), r->end());
    }
    const auto agg = aggregate_interim(parts);
    REQUIRE(agg.size() == 2);
    const double w = static_cast<double>(parts[0].n) / static_cast<double>(parts[0].n + parts[2].n);
    CHECK(agg[0].value == doctest::Approx(w * parts[0].value + (1 - w) * parts[2].value));
    CHECK(agg[0].n == parts[0].n + parts[2].n);
    CHECK_THROWS_AS(assumption2_test(ctx, 3, 2), DomainError);
  }
  SUBCASE("absent without later-enrollees") {
    SimConfig cfg;
    cfg.n_workers = 2000;
    cfg.K = 2;
    cfg.horizon = 1;
    cfg.ybar = {-1e9};
    auto [data, truth] = simulate_panel(cfg);
    auto cells = partition_cells(data, {});
    auto book = fit_score_book(data, cells);
    EstimationContext ctx{data, cells, book};
    CHECK(!assumption2_test(ctx, 1, 1));
  }
  SUBCASE("reversed selection on exhaustive populations is detected") {
    std::mt19937_64 rng(6);
    PopulationOptions opts;
    opts.negative_selection = false;
    for (int rep = 0; rep < 10; ++rep) {
      const auto pop = random_population(rng, opts);
      const auto data = population_panel(pop);
      const auto cells = partition_cells(data, {});
      const auto book = saturated_score_book(data, cells);
      EstimationContext ctx{data, cells, book, {1, TieMode::All}};
      auto r = assumption2_test(ctx, 1, 1);
      REQUIRE(r);
      // Populations with a single interim type per pattern carry no selection.
      const auto e = enumerate_tot(pop, 1);
      CHECK((*r)[0].value >= -1e-9);
      if (e.lower > e.truth + 1e-9) CHECK((*r)[0].value > 0);
    }
  }
}

TEST_CASE("holm adjustment") {
  const std::vector<double> p{0.01, 0.04, 0.03};
  const auto adj = holm_adjust(p);
  CHECK(adj[0] == doctest::Approx(0.03));
  CHECK(adj[1] == doctest::Approx(0.06));
  CHECK(adj[2] == doctest::Approx(0.06));
  CHECK(holm_adjust(std::vector<double>{0.2}) == std::vector<double>{0.2});
  CHECK_THROWS_AS(holm_adjust(std::vector<double>{1.5}), DomainError);

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0, 0.3);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> r(10);
    for (auto& x : r) x = u(rng);
    r[3] = r[7];  // a tie
    const auto a = holm_adjust(r);
    const auto ref = holm_reference(r);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(a[i] == doctest::Approx(ref[i]).epsilon(1e-15));
    auto perm = r;
    std::vector<std::size_t> idx(r.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = 0; i < r.size(); ++i) perm[i] = r[idx[i]];
    const auto b = holm_adjust(perm);
    for (std::size_t i = 0; i < r.size(); ++i) CHECK(b[i] == a[idx[i]]);
  }
}

TEST_CASE("industry switch decomposition") {
  PanelDataset data;
  data.window_length = 1;
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> ind(1, 4);
  std::uniform_real_distribution<double> y(0, 9000);
  std::bernoulli_distribution employed(0.7);
  for (int i = 0; i < 60; ++i) {
    auto w = worker("w" + std::to_string(i), i < 20 ? std::optional<int>(1) : std::nullopt, {});
    QuarterSeries code;
    code.set(0, ind(rng));
    for (int q = 0; q <= 6; ++q) {
      const bool e = q == 0 || employed(rng);
      w.earnings.set(q, e ? y(rng) : 0.0);
      if (e) code.set(q, ind(rng));
    }
    w.aux["ind"] = code;
    data.workers.push_back(w);
  }
  std::vector<AlignedMember> group;
  for (WorkerIndex i = 0; i < 60; ++i) group.push_back({i, 1, 1.0 + static_cast<double>(i % 3)});

  SUBCASE("components add up to mean earnings") {
    const auto parts = industry_switch_decomposition(data, group, "ind", 0, 5);
    for (const auto& c : parts) {
      double num = 0, den = 0;
      for (const auto& m : group) {
        num += m.weight * *data.workers[m.worker].earnings.at(1 + c.tau);
        den += m.weight;
      }
      CHECK(std::abs(c.same + c.diff - c.total) < 1e-12 * c.total);
      CHECK(c.total == doctest::Approx(num / den).epsilon(1e-12));
      CHECK(c.p_same + c.p_diff + c.p_nonemployed == doctest::Approx(1.0).epsilon(1e-14));
      if (c.p_same > 0) CHECK(c.p_same * c.mean_same == doctest::Approx(c.same).epsilon(1e-12));
    }
  }
  SUBCASE("stayers only") {
    for (auto& w : data.workers) {
      QuarterSeries code;
      for (int q = 0; q <= 6; ++q) code.set(q, 7);
      w.aux["ind"] = code;
    }
    for (const auto& c : industry_switch_decomposition(data, group, "ind", 0, 5)) {
      CHECK(c.diff == 0.0);
      CHECK(c.same == doctest::Approx(c.total).epsilon(1e-14));
    }
  }
  SUBCASE("employed quarter without a code") {
    for (auto& w : data.workers) w.aux.clear();
    CHECK_THROWS_AS(industry_switch_decomposition(data, group, "ind", 0, 0), DomainError);
  }
  SUBCASE("published shares of the gain reconcile") {
    // Gaps in the two components sum to the overall gap: 103% + (-3%).
    CHECK(1.03 + -0.03 == doctest::Approx(1.0));
  }
}

TEST_CASE("extensive margin decomposition") {
  SUBCASE("equal wage rates put everything on weeks") {
    // E_N = 5000, W_N = 10: wage 500; enrollees 12 weeks at the same wage.
    const auto r = extensive_margin_decomposition(1000.0, 2.0, 5000.0, 10.0);
    CHECK(r.weeks_term == doctest::Approx(1000.0));
    CHECK(r.rate_term == doctest::Approx(0.0).scale(1.0));
    CHECK(r.share == doctest::Approx(1.0));
  }
  SUBCASE("identity on random inputs") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 200; ++i) {
      const double de = 2000 * u(rng) - 500, dw = 3 * u(rng) - 1, en = 3000 + 4000 * u(rng), wn = 5 + 5 * u(rng);
      const double adj = 0.5 * u(rng);
      const auto r = extensive_margin_decomposition(de, dw, en, wn, adj);
      CHECK(std::abs(r.weeks_term + r.rate_term + r.adjust_term - de) <= 1e-12 * std::max(1.0, std::abs(de)));
    }
  }
  SUBCASE("published weekly wages") {
    // 5354 over 7.3 weeks is about 730 per week.
    CHECK(std::round(5354.0 / 7.3 / 10) * 10 == 730.0);
  }
  SUBCASE("zero weeks") { CHECK_THROWS_AS(extensive_margin_decomposition(1, 1, 1, 0), DomainError); }
}

TEST_CASE("completer decomposition") {
  PanelDataset data;
  data.window_length = 2;
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> y(0, 9000);
  std::bernoulli_distribution done(0.3);
  IndexList enrollees;
  for (int i = 0; i < 50; ++i) {
    auto w = worker("e" + std::to_string(i), 1 + i % 2, {});
    for (int q = 0; q <= 6; ++q) w.earnings.set(q, y(rng));
    w.completer = done(rng);
    data.workers.push_back(w);
    enrollees.push_back(static_cast<WorkerIndex>(i));
  }
  SUBCASE("components add up") {
    for (const auto& c : completer_decomposition(data, enrollees, 0, 4)) {
      double mean = 0;
      for (auto w : enrollees) mean += *data.workers[w].earnings.at(*data.workers[w].enroll_quarter + c.tau);
      mean /= 50;
      CHECK(std::abs(c.completer + c.noncompleter - c.total) <= 1e-12 * c.total);
      CHECK(c.total == doctest::Approx(mean).epsilon(1e-12));
    }
  }
  SUBCASE("all completers") {
    for (auto& w : data.workers) w.completer = true;
    for (const auto& c : completer_decomposition(data, enrollees, 0, 2)) {
      CHECK(c.noncompleter == 0.0);
      CHECK(c.p_completer == 1.0);
    }
  }
  SUBCASE("missing flag") {
    data.workers[4].completer.reset();
    CHECK_THROWS_AS(completer_decomposition(data, enrollees, 0, 0), DomainError);
  }
  SUBCASE("published contributions") {
    // 982 + 1,585 against a total gain of 2,566 (rounded inputs).
    CHECK(std::abs(982.0 + 1585.0 - 2566.0) <= 1.0);
    // Per-capita gains scaled to a 50% completer share.
    const double per_completer = 982.0 / 0.26, per_non = 1585.0 / 0.74;
    CHECK(std::round(0.5 * per_completer + 0.5 * per_non) == 2959.0);
  }
}

TEST_CASE("overlap report") {
  SUBCASE("constant scores") {
    std::vector<double> half(10, 0.5);
    const auto r = overlap_report(half, half);
    REQUIRE(r.treated_count.size() == 1);
    CHECK(r.edges.front() == 0.0);
    CHECK(r.treated_count[0] == 10);
    CHECK(r.treated_density[0] == 1.0);
  }
  SUBCASE("binning oracle") {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(0.001, 0.999);
    std::vector<double> t(1000), c(1500);
    for (auto& x : t) x = u(rng);
    for (auto& x : c) x = u(rng) * 0.7;
    const auto r = overlap_report(t, c, 60, 0.9);
    REQUIRE(r.edges.size() == 61);
    double lo = 1e9, hi = -1e9;
    for (auto* v : {&t, &c})
      for (double p : *v) lo = std::min(lo, std::log(p / (1 - p))), hi = std::max(hi, std::log(p / (1 - p)));
    std::vector<std::size_t> ref(60, 0);
    for (double p : t) {
      const double x = std::log(p / (1 - p));
      std::size_t b = 0;
      while (b + 1 < 60 && x >= lo + (hi - lo) * static_cast<double>(b + 1) / 60.0) ++b;
      ++ref[b];
    }
    CHECK(r.treated_count == ref);
    double mass = 0;
    for (double d : r.control_density) mass += d;
    CHECK(mass == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(r.control_above == 0.0);
    CHECK(r.treated_above == doctest::Approx(std::count_if(t.begin(), t.end(), [](double p) { return p > 0.9; }) / 1000.0));
  }
  SUBCASE("scores outside (0,1)") {
    std::vector<double> bad{0.0, 0.5};
    CHECK_THROWS_AS(overlap_report(bad, bad), DomainError);
  }
}

TEST_CASE("outcome cdf") {
  const auto c = outcome_cdf(std::vector<double>{3, 1, 2});
  REQUIRE(c.size() == 3);
  CHECK(c[0].value == 1.0);
  CHECK(c[0].cdf == doctest::Approx(1.0 / 3));
  CHECK(c[1].cdf == doctest::Approx(2.0 / 3));
  CHECK(c[2].cdf == 1.0);
  CHECK_THROWS_AS(outcome_cdf(std::vector<double>{}), DomainError);

  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> d(0, 100);
  std::vector<double> v(500);
  for (auto& x : v) x = d(rng);
  const auto e = outcome_cdf(v);
  auto sorted = v;
  std::sort(sorted.begin(), sorted.end());
  double worst = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (i) CHECK(e[i].cdf >= e[i - 1].cdf);
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), e[i].value) - sorted.begin();
    worst = std::max(worst, std::abs(e[i].cdf - static_cast<double>(count) / 500.0));
  }
  CHECK(worst <= 1e-15);

  const auto w = outcome_cdf(std::vector<double>{1, 2}, std::vector<double>{3, 1});
  CHECK(w[0].cdf == 0.75);
}

TEST_CASE("diagnostic exports") {
  CovariateBalance b;
  b.name = "y_m0", b.mean_treated = 1, b.mean_control = 0.5, b.sd_treated = 1, b.sd_control = 1;
  b.normalized_difference = 0.5, b.t_statistic = 2;
  BalanceReport r;
  r.cohort = 2;
  r.sample = BalanceSample::Matched;
  r.rows = {b};
  std::ostringstream out;
  write_balance(out, std::vector<BalanceReport>{r});
  CHECK(out.str() ==
        "cohort,sample,covariate,mean_treated,mean_control,sd_treated,sd_control,normalized_difference,t_statistic\n"
        "2,matched,y_m0,1,0.5,1,1,0.5,2\n");
}
