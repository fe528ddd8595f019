#ifndef DYNMATCH_VALIDATION_HPP
#define DYNMATCH_VALIDATION_HPP

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dynmatch/simulation.hpp"

namespace dynmatch {

/// Outcome of one oracle check.
struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

/// beta_ac / beta_hr against the projection oracle on the rho x K x t grid.
CheckResult check_beta_grid();

/// Sample projection of Y_t(0) on Y_1(0) + upsilon given X^1 on one AC panel
/// with unit variances, against beta_ac within 3 standard errors.
CheckResult check_regression_recovery(std::size_t n, int K, const std::vector<int>& quarters, std::uint64_t seed);

/// Lechner, IPW and the sequential-product oracle agree on exhaustive
/// populations and are bracketed by the population bounds.
CheckResult check_point_identification(int populations, std::uint64_t seed);

struct CoverageOptions {
  int reps = 200;
  std::size_t n = 20000;
  double alpha = 500.0;
  double rho = 0.75;
  int quarter = 2;  // cohort 1 outcome quarter
  std::uint64_t seed = 1;
};

/// Frequency of lower bound <= alpha and upper bound >= alpha over AC
/// replications; the Lechner mean must lie within 2 pooled SEs of alpha.
CheckResult check_bound_coverage(const CoverageOptions& opts);

/// Zero later-enrollees: lb, ub, Lechner and now-vs-later are bitwise equal.
CheckResult check_collapse(std::uint64_t seed);

struct InterimOptions {
  int reps = 100;
  std::size_t n = 10000;
  int S = 3;
  std::uint64_t seed = 1;
};

/// AC and HR panels give negative interim differentials in at least 95% of
/// replications for every (lag, quarter); the independence configuration
/// gives a mean differential within 2 Monte Carlo SEs of zero.
CheckResult check_interim_sign(const InterimOptions& opts);

/// Hand-built population where later-enrollees have high interim earnings
/// and outcomes: the lower bound exceeds the truth and the interim
/// differential is positive.
DiscretePopulation violating_population();
CheckResult check_violation();

/// Prints `PASS|FAIL  name  (seconds)  detail`, one line per check.
void print_results(std::ostream& out, const std::vector<CheckResult>& results);

}  // namespace dynmatch

#endif  // DYNMATCH_VALIDATION_HPP
