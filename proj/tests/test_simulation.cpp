#include <doctest.h>

#include <random>

#include "dynmatch/simulation.hpp"

using namespace dynmatch;

TEST_CASE("beta closed forms reduce in degenerate cases") {
  CHECK(beta_ac(0.0, 0.0, 1.0, 1.0, 0, 1) == doctest::Approx(0.5));
  CHECK(beta_ac(0.0, 0.0, 2.0, 1.0, 0, 1) == doctest::Approx(4.0 / 5.0));
  for (int t = 2; t <= 6; ++t) CHECK(beta_ac(0.0, 0.0, 1.0, 1.0, 3, t) == 0.0);
  CHECK(beta_hr(0.0, 0.0, 1.0, 1.0, 2, 1) == 0.0);
  CHECK(beta_hr(0.0, 0.0, 1.0, 1.0, 2, 2) == doctest::Approx(0.5));
}

TEST_CASE("beta closed forms match the covariance-algebra projection") {
  const Sigmas unit{1.0, 1.0, 1.0};
  CHECK(std::abs(beta_ac(0.5, 1.0, 1.0, 1.0, 2, 3) - projection_coefficients(0.5, unit, 2, 3, 1)(0)) < 1e-12);
  CHECK(std::abs(beta_hr(0.8, 1.0, 1.0, 1.0, 4, 5) - projection_coefficients(0.8, unit, 4, 5, 2)(0)) < 1e-12);

  const Sigmas mixed{0.7, 1.3, 0.4};
  for (double rho : {0.1, 0.25, 0.5, 0.75, 0.9})
    for (int K : {0, 1, 4, 12})
      for (int t = 1; t <= 8; ++t) {
        const double ac = beta_ac(rho, mixed.omega, mixed.eps, mixed.upsilon, K, t);
        const double hr = beta_hr(rho, mixed.omega, mixed.eps, mixed.upsilon, K, t);
        CHECK(std::abs(ac - projection_coefficients(rho, mixed, K, t, 1)(0)) < 1e-10);
        CHECK(std::abs(hr - projection_coefficients(rho, mixed, K, t, 2)(0)) < 1e-10);
        CHECK(ac > 0);
        CHECK(hr > 0);
      }
}

TEST_CASE("transitory component starts stationary") {
  SimConfig cfg;
  cfg.n_workers = 40000;
  cfg.sigma = {0.0, 1.0, 1.0};
  cfg.lambda = 0.0;
  cfg.rho = 0.9;
  cfg.seed = 11;
  const auto lp = simulate_latent(cfg);
  for (int q = lp.first_quarter; q <= lp.last_quarter; q += 5) {
    const VectorXd col = lp.y0.col(q - lp.first_quarter);
    const double mean = col.mean();
    const double var = (col.array() - mean).square().sum() / static_cast<double>(col.size() - 1);
    // sd of a sample variance of n normals is about sqrt(2/n) = 0.007
    CHECK(var == doctest::Approx(1.0).epsilon(0.04));
  }
}

TEST_CASE("simulated panels") {
  SimConfig cfg;
  cfg.n_workers = 3000;
  cfg.seed = 5;

  SUBCASE("valid and reproducible") {
    auto [a, ta] = simulate_panel(cfg);
    auto [b, tb] = simulate_panel(cfg);
    CHECK(a == b);
    CHECK(a.validate().empty());
    CHECK(ta.shares.size() == 2);
    CHECK(ta.shares[0] + ta.shares[1] == doctest::Approx(1.0));
    CHECK(!a.enrollees(1).empty());
    CHECK(!a.enrollees(2).empty());
    cfg.seed = 6;
    auto [c, tc] = simulate_panel(cfg);
    CHECK(!(a == c));
  }
  SUBCASE("zero effect leaves no gap") {
    cfg.alpha = 0.0;
    auto [data, truth] = simulate_panel(cfg);
    for (const auto& [key, d] : truth.delta) CHECK(d == 0.0);
  }
  SUBCASE("constant effect without binding truncation") {
    cfg.truncate = false;
    auto [data, truth] = simulate_panel(cfg);
    for (const auto& [key, d] : truth.delta) CHECK(d == doctest::Approx(500.0));
  }
  SUBCASE("lock-in profile applies by event time") {
    cfg.truncate = false;
    cfg.lock_in = {-300.0, -100.0};
    auto [data, truth] = simulate_panel(cfg);
    CHECK(truth.delta.at({1, 0}) == doctest::Approx(-300.0));
    CHECK(truth.delta.at({2, 1}) == doctest::Approx(-100.0));
    CHECK(truth.delta.at({1, 5}) == doctest::Approx(500.0));
  }
}

TEST_CASE("projection of Y_t(0) is recovered by regression on a simulated panel") {
  SimConfig cfg;
  cfg.n_workers = 200000;
  cfg.sigma = {1.0, 1.0, 1.0};
  cfg.lambda = 0.0;
  cfg.K = 2;
  cfg.d1_ybar = -1.0;
  cfg.truncate = false;
  cfg.seed = 17;
  const auto lp = simulate_latent(cfg);
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < lp.enroll.size(); ++i)
    if (lp.enroll[i] != 1) rows.push_back(static_cast<Eigen::Index>(i));
  const auto n = static_cast<Eigen::Index>(rows.size());
  MatrixXd X(n, cfg.K + 3);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]);
    X(r, 0) = 1.0;
    X(r, 1) = lp.at(i, 1) + lp.upsilon(rows[static_cast<std::size_t>(r)], 1);
    for (int k = 0; k <= cfg.K; ++k) X(r, 2 + k) = lp.at(i, -cfg.K + k);
  }
  for (int t : {1, 3}) {
    VectorXd y(n);
    for (Eigen::Index r = 0; r < n; ++r) y(r) = lp.at(static_cast<std::size_t>(rows[static_cast<std::size_t>(r)]), t);
    const VectorXd b = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    const VectorXd e = y - X * b;
    const MatrixXd inv = (X.transpose() * X).inverse();
    const double se = std::sqrt(inv(1, 1) * e.squaredNorm() / static_cast<double>(n - X.cols()));
    CHECK(std::abs(b(1) - beta_ac(0.75, 1.0, 1.0, 1.0, cfg.K, t)) < 4 * se);
  }
}

TEST_CASE("robins oracle") {
  std::mt19937_64 rng(3);
  SUBCASE("matches the constructed counterfactual") {
    for (int rep = 0; rep < 20; ++rep) {
      const auto pop = random_population(rng);
      CHECK(std::abs(robins_oracle(pop) - true_counterfactual(pop)) < 1e-9);
    }
  }
  SUBCASE("without later enrollment it is one-step matching") {
    PopulationOptions opts;
    opts.later_enrollees = false;
    const auto pop = random_population(rng, opts);
    std::map<double, std::pair<double, double>> never;
    std::map<double, double> treated;
    double n1 = 0;
    for (const auto& r : pop.rows) {
      const double c = static_cast<double>(r.count);
      CHECK(r.enroll != 2);
      if (r.enroll == 1) {
        treated[r.x1] += c;
        n1 += c;
      } else {
        never[r.x1].first += c * r.yt;
        never[r.x1].second += c;
      }
    }
    double direct = 0;
    for (const auto& [x, c] : treated) direct += c / n1 * never[x].first / never[x].second;
    CHECK(robins_oracle(pop) == doctest::Approx(direct).epsilon(1e-12));
  }
  SUBCASE("degenerate outcomes") {
    auto pop = random_population(rng);
    for (auto& r : pop.rows) r.yt = r.y00 = 1234.0;
    CHECK(robins_oracle(pop) == doctest::Approx(1234.0).epsilon(1e-14));
  }
  SUBCASE("empty conditioning cell is an overlap error") {
    DiscretePopulation pop;
    pop.rows.push_back({1000, 1, 0, 5, 5, 1});
    pop.rows.push_back({1000, 2, 10, 5, 5, 1});
    CHECK_THROWS_AS(robins_oracle(pop), OverlapError);
  }
}

TEST_CASE("population estimands") {
  std::mt19937_64 rng(8);
  SUBCASE("bounds bracket the truth under negative selection") {
    for (int rep = 0; rep < 25; ++rep) {
      const auto pop = random_population(rng);
      const auto e = enumerate_tot(pop, 1);
      CHECK(std::abs(e.lechner - e.truth) < 1e-9);
      CHECK(std::abs(e.ipw - e.truth) < 1e-9);
      CHECK(e.lower <= e.truth + 1e-9);
      CHECK(e.truth <= e.upper + 1e-9);
    }
  }
  SUBCASE("reversed selection pushes the lower bound above the truth") {
    PopulationOptions opts;
    opts.negative_selection = false;
    int above = 0;
    for (int rep = 0; rep < 25; ++rep) {
      const auto e = enumerate_tot(random_population(rng, opts), 1);
      CHECK(e.lower >= e.truth - 1e-9);
      above += e.lower > e.truth + 1e-9;
    }
    CHECK(above > 0);
  }
  SUBCASE("no later enrollees: all four coincide") {
    PopulationOptions opts;
    opts.later_enrollees = false;
    const auto e = enumerate_tot(random_population(rng, opts), 1);
    CHECK(e.lower == doctest::Approx(e.truth).epsilon(1e-12));
    CHECK(e.upper == doctest::Approx(e.truth).epsilon(1e-12));
    CHECK(e.lechner == doctest::Approx(e.truth).epsilon(1e-12));
    CHECK(e.ipw == doctest::Approx(e.truth).epsilon(1e-12));
  }
  SUBCASE("last cohort is point identified by the lower bound") {
    const auto e = enumerate_tot(random_population(rng), 2);
    CHECK(std::abs(e.lower - e.truth) < 1e-9);
  }
}

TEST_CASE("population panel layout") {
  std::mt19937_64 rng(1);
  const auto pop = random_population(rng);
  auto data = population_panel(pop);
  CHECK(data.size() == pop.size());
  CHECK(data.validate().empty());
}
