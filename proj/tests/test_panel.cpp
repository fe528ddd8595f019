#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "dynmatch/panel.hpp"
#include "dynmatch/text.hpp"

using namespace dynmatch;

namespace {

PanelDataset parse(const std::string& csv, const std::string& schema, int window) {
  std::istringstream in(csv);
  return read_panel(in, CovariateSpec::parse(schema), window);
}

const char* kThreeRows =
    "id,layoff_q,enroll_q,completer,age,y_m1,y_m0,y_p1,y_p2\n"
    "a,10,1,1,34,5000,4800,0,100\n"
    "b,10,,,41,6000,6100,5900,6000\n"
    "c,11,,,29,3000,2900,3100,3200\n";

PanelDataset random_panel(std::mt19937_64& rng, int n, int window) {
  PanelDataset d;
  d.window_length = window;
  d.covariate_spec = CovariateSpec::parse("y_m2:lag,y_m1:lag,age:demo,sex:cat,layoff_q:key,hours:aux");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> e(0, window);
  for (int i = 0; i < n; ++i) {
    Worker w;
    w.id = "w" + std::to_string(i);
    w.layoff_quarter = 100 + e(rng);
    int enroll = e(rng);
    if (enroll > 0) w.enroll_quarter = enroll;
    if (u(rng) < 0.5) w.completer = u(rng) < 0.5;
    w.covariates["age"] = std::floor(20 + 40 * u(rng));
    w.covariates["sex"] = std::string(u(rng) < 0.5 ? "f" : "m");
    for (int q = -2; q <= window + 3; ++q) {
      if (q > window && u(rng) < 0.3) continue;  // ragged tail
      w.earnings.set(q, u(rng) < 0.1 ? 0.0 : 1e4 * u(rng));
    }
    for (int q = 0; q <= 2; ++q) w.aux["hours"].set(q, std::round(500 * u(rng)) / 7.0);
    d.workers.push_back(std::move(w));
  }
  REQUIRE(d.validate().empty());
  return d;
}

}  // namespace

TEST_CASE("wide file with one enrollee parses into cohorts") {
  auto d = parse(kThreeRows, "y_m1:lag,y_m0:lag,age:demo,layoff_q:key", 2);
  CHECK(d.size() == 3);
  CHECK(d.enrollees(1) == IndexList{0});
  CHECK(d.never_enrollees() == IndexList{1, 2});
  CHECK(d.workers[0].completer == std::optional<bool>(true));
  CHECK(d.workers[0].earnings.value_or_missing(-1) == 5000);
  CHECK(d.workers[2].cell_keys == std::vector<std::string>{"11"});
}

TEST_CASE("negative earnings produce a located validation error") {
  std::string csv = kThreeRows;
  csv.replace(csv.find("5900"), 4, "-5");
  try {
    parse(csv, "y_m1:lag,y_m0:lag,age:demo", 2);
    FAIL("expected validation error");
  } catch (const ValidationError& e) {
    REQUIRE(e.violations().size() == 1);
    CHECK(e.violations()[0].row == 2);
    CHECK(e.violations()[0].field == "y_p1");
    CHECK(e.to_json().find("\"row\": 2") != std::string::npos);
  }
}

TEST_CASE("enroll quarter outside the window is rejected") {
  std::string csv = kThreeRows;
  csv.replace(csv.find("a,10,1"), 6, "a,10,3");
  CHECK_THROWS_AS(parse(csv, "y_m1:lag,y_m0:lag,age:demo", 2), ValidationError);
}

TEST_CASE("missing schema column is a schema error") {
  CHECK_THROWS_AS(parse(kThreeRows, "y_m1:lag,educ:demo", 2), SchemaError);
  CHECK_THROWS_AS(parse(kThreeRows, "y_m3:lag", 2), SchemaError);
  CHECK_THROWS_AS(parse(kThreeRows, "y_m1:lag", 2), SchemaError);  // age undeclared
}

TEST_CASE("required interim quarter must be present") {
  std::string csv = kThreeRows;
  csv.replace(csv.find("5900"), 4, "");
  CHECK_THROWS_AS(parse(csv, "y_m1:lag,y_m0:lag,age:demo", 2), ValidationError);
  // Enrollee at s=1 needs no interim quarter.
  std::string ok = kThreeRows;
  ok.replace(ok.find(",0,100"), 6, ",,100");
  CHECK_NOTHROW(parse(ok, "y_m1:lag,y_m0:lag,age:demo", 2));
}

TEST_CASE("duplicate ids are rejected") {
  std::string csv = kThreeRows;
  csv.replace(csv.find("\nb,"), 3, "\na,");
  CHECK_THROWS_AS(parse(csv, "y_m1:lag,y_m0:lag,age:demo", 2), ValidationError);
}

TEST_CASE("write then load reproduces random panels") {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    auto d = random_panel(rng, 1 + rep * 3, 1 + rep % 4);
    std::stringstream ss;
    write_panel(d, ss);
    auto back = read_panel(ss, d.covariate_spec, d.window_length);
    CHECK(back == d);
  }
}

TEST_CASE("long layout joins the static table") {
  std::string dir = std::filesystem::temp_directory_path().string();
  std::string st = dir + "/dm_static.csv", lg = dir + "/dm_long.csv";
  {
    std::ofstream(st) << "id,layoff_q,enroll_q,age\na,1,1,30\nb,1,,40\n";
    std::ofstream(lg) << "id,rel_quarter,earnings\na,0,10\na,1,0\nb,0,20\nb,1,25\nb,2,30\n";
  }
  auto d = load_panel_long(st, lg, CovariateSpec::parse("y_m0:lag,age:demo"), 2);
  CHECK(d.workers[1].earnings.value_or_missing(2) == 30);
  CHECK(d.enrollees(1) == IndexList{0});
  std::ofstream(lg) << "id,rel_quarter,earnings\na,0,10\nzz,0,1\nb,0,20\nb,1,25\n";
  CHECK_THROWS_AS(load_panel_long(st, lg, CovariateSpec::parse("y_m0:lag,age:demo"), 2), ValidationError);
}

TEST_CASE("cohort views") {
  std::string csv =
      "id,layoff_q,enroll_q,age,sex,y_m0,y_p1,y_p2,y_p3\n"
      "a,1,1,30,m,10,11,12,13\n"
      "b,1,2,31,f,20,21,22,23\n"
      "c,1,3,32,x,30,31,32,33\n"
      "d,1,,33,m,40,41,42,43\n"
      "e,1,,34,f,50,51,52,53\n";
  auto d = parse(csv, "y_m0:lag,age:demo,sex:cat", 3);

  SUBCASE("s=1 has the baseline columns only") {
    auto v = build_cohort_view(d, 1);
    CHECK(v.columns == std::vector<std::string>{"y_m0", "age", "sex=m", "sex=x"});
    CHECK(v.design.cols() == 4);
    CHECK(v.treated == IndexList{0});
    CHECK(v.later == IndexList{1, 2});
  }
  SUBCASE("s=2 excludes workers already enrolled") {
    auto v = build_cohort_view(d, 2);
    CHECK(v.at_risk == IndexList{1, 2, 3, 4});
    CHECK(v.row_of(0) == -1);
    CHECK(v.fit_pool(true) == IndexList{1, 3, 4});
    CHECK(v.fit_pool(false) == IndexList{1, 2, 3, 4});
  }
  SUBCASE("s=3 appends interim earnings column by column") {
    auto v = build_cohort_view(d, 3);
    REQUIRE(v.columns.size() == 6);
    CHECK(v.columns[4] == "y_p1");
    CHECK(v.columns[5] == "y_p2");
    MatrixXd expect(3, 6);
    expect << 30, 32, 0, 1, 31, 32,  //
        40, 33, 1, 0, 41, 42,        //
        50, 34, 0, 0, 51, 52;
    CHECK(v.at_risk == IndexList{2, 3, 4});
    CHECK(v.design == expect);
  }
  SUBCASE("design for s+1 has design for s as a prefix") {
    for (int s = 1; s < 3; ++s) {
      auto a = build_cohort_view(d, s), b = build_cohort_view(d, s + 1);
      for (std::size_t i = 0; i < a.columns.size(); ++i) CHECK(a.columns[i] == b.columns[i]);
      for (auto w : b.at_risk)
        CHECK(a.design.row(a.row_of(w)) == b.design.row(b.row_of(w)).head(a.design.cols()));
    }
  }
  CHECK_THROWS_AS(build_cohort_view(d, 4), DomainError);
  CHECK_THROWS_AS(build_cohort_view(d, 0), DomainError);
}

TEST_CASE("treated sets are disjoint across cohorts and from controls") {
  std::mt19937_64 rng(11);
  auto d = random_panel(rng, 200, 4);
  std::vector<int> seen(d.size(), 0);
  for (int s = 1; s <= 4; ++s) {
    auto v = build_cohort_view(d, s);
    for (auto w : v.treated) ++seen[w];
    for (auto w : v.controls) CHECK(!d.workers[w].enrolled());
    for (auto w : v.treated) CHECK(v.row_of(w) >= 0);
  }
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(seen[i] == (d.workers[i].enrolled() ? 1 : 0));
}

TEST_CASE("event-time trajectories") {
  PanelDataset d;
  d.window_length = 1;
  Worker a;
  a.id = "a";
  a.earnings.set(0, 100);
  a.earnings.set(1, 200);
  d.workers.push_back(a);
  std::vector<AlignedMember> one{{0, 0, 1.0}};
  auto t = event_time_trajectory(d, one, 0, 1);
  CHECK(t[0].mean == 100);
  CHECK(t[1].mean == 200);

  Worker b;
  b.id = "b";
  b.earnings.set(1, 300);
  b.earnings.set(2, 500);
  d.workers.push_back(b);
  std::vector<AlignedMember> two{{0, 0, 1.0}, {1, 1, 1.0}};
  t = event_time_trajectory(d, two, 0, 2);
  CHECK(t[0].mean == 200);
  CHECK(t[0].count == 2);
  CHECK(t[1].mean == 350);
  CHECK(t[2].count == 0);

  IndexList grp{0, 1};
  CHECK_THROWS_AS(event_time_trajectory(d, grp, {{0, 0}}, 0, 1), DomainError);
}

TEST_CASE("trajectory equals a naive loop on a simulated panel") {
  std::mt19937_64 rng(3);
  auto d = random_panel(rng, 50, 3);
  IndexList grp;
  std::map<WorkerIndex, int> align;
  for (WorkerIndex i = 0; i < d.size(); ++i) {
    grp.push_back(i);
    align[i] = d.workers[i].enroll_quarter.value_or(static_cast<int>(1 + i % 3));
  }
  auto t = event_time_trajectory(d, grp, align, -3, 4);
  for (int tau = -3; tau <= 4; ++tau) {
    double sum = 0;
    int n = 0;
    for (auto i : grp) {
      auto y = d.workers[i].earnings.at(align[i] + tau);
      if (y) {
        sum += *y;
        ++n;
      }
    }
    CHECK(t[tau].count == static_cast<std::size_t>(n));
    if (n) CHECK(std::abs(t[tau].mean - sum / n) <= 1e-12 * std::max(1.0, std::abs(sum / n)));
  }
}

TEST_CASE("covariate spec grammar") {
  auto s = CovariateSpec::parse("y_m3:lag, age:demo, sex:cat, layoff_q:key, industry:aux");
  CHECK(s.defs.size() == 4);
  CHECK(s.defs[0].quarter == -3);
  CHECK(s.exact_keys() == std::vector<std::string>{"layoff_q"});
  CHECK(s.aux_series == std::vector<std::string>{"industry"});
  CHECK(CovariateSpec::parse(s.to_string()) == s);
  CHECK_THROWS_AS(CovariateSpec::parse("age"), SchemaError);
  CHECK_THROWS_AS(CovariateSpec::parse("age:weird"), SchemaError);
  CHECK_THROWS_AS(CovariateSpec::parse("earn:lag"), SchemaError);
  CHECK_THROWS_AS(CovariateSpec::parse("age:demo,age:demo"), SchemaError);
}

TEST_CASE("number formatting round-trips") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 1000; ++i) {
    double x = u(rng);
    CHECK(*text::parse_double(text::format_double(x)) == x);
  }
  CHECK(text::format_double(100.0) == "100");
  CHECK(text::format_double(-0.0) == "0");
  CHECK(text::format_double(kMissing).empty());
}
