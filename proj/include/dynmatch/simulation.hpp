#ifndef DYNMATCH_SIMULATION_HPP
#define DYNMATCH_SIMULATION_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/panel.hpp"

namespace dynmatch {

struct Sigmas {
  double omega = 1.0;    // permanent component
  double eps = 1.0;      // stationary sd of the AR(1) transitory component
  double upsilon = 1.0;  // selection noise
};

enum class SelectionRule {
  AC,  // enroll at s when Y_{s-k} + upsilon_s < ybar_s
  HR,  // enroll at s when Y_s(0) + upsilon_s < alpha / r
};

struct SimConfig {
  std::size_t n_workers = 10000;
  int S = 2;
  int K = 4;  // X^1 holds quarters -K..0
  double rho = 0.75;
  Sigmas sigma{2000.0, 1500.0, 1500.0};
  double lambda = 8000.0;            // time effect where `lambda_by_quarter` has no entry
  std::map<int, double> lambda_by_quarter;

  SelectionRule rule = SelectionRule::AC;
  int k = 1;                          // AC lag used for s >= 2
  std::vector<double> ybar{4500.0};   // per period; the last value repeats
  double hr_alpha = 500.0;
  double hr_r = 0.111;
  int d1_lag = 1;                     // period 1 uses Y_{1 - d1_lag}
  double d1_ybar = 4500.0;

  double alpha = 500.0;                // effect from enrollment onward
  std::vector<double> lock_in;         // effect at event times 0, 1, ... before alpha applies
  int horizon = 16;                    // quarters simulated after S
  bool truncate = true;                // floor earnings at zero

  // Completer types: H = 1 when omega + eta < completer_cut, eta ~ N(0, completer_noise^2).
  bool completers = false;
  double completer_cut = 0.0;
  double completer_noise = 1000.0;
  double completer_alpha = 1500.0;     // effect for completers
  double noncompleter_alpha = 0.0;     // effect for non-completers

  std::uint64_t seed = 1;

  /// Throws DomainError on invalid settings.
  void validate() const;
  /// Effect at event time tau >= 0 for a worker of the given type.
  double effect(int tau, bool completer) const;
};

/// Untreated paths and selection draws before the observation rule.
struct LatentPanel {
  int first_quarter = 0;
  int last_quarter = 0;
  MatrixXd y0;            // workers x quarters, untreated earnings without truncation
  MatrixXd upsilon;       // workers x S
  std::vector<int> enroll;  // 0 = never
  std::vector<char> completer;

  double at(std::size_t worker, int quarter) const {
    return y0(static_cast<Eigen::Index>(worker), quarter - first_quarter);
  }
};

LatentPanel simulate_latent(const SimConfig& cfg);

struct SimTruth {
  // Mean of Y(1) - Y(0) over cohort-s enrollees, keyed by (s, tau), using
  // the same truncation as the observed panel.
  std::map<std::pair<int, int>, double> delta;
  std::map<std::pair<int, int>, double> completer_delta;
  std::map<int, double> beta;  // projection coefficient by quarter t (AC or HR)
  std::vector<double> shares;  // realized enrollment shares by cohort
  std::size_t truncated = 0;   // truncated observed earnings values
};

/// Panel with lags y_m<K>..y_m0 as covariates. Quarters run from
/// min(-K, selection lags) to S + horizon.
std::pair<PanelDataset, SimTruth> simulate_panel(const SimConfig& cfg);

/// Closed-form projection coefficient of Y_t(0) on Y_1(0) + upsilon given
/// X^1 = (Y_{-K}, ..., Y_0) under the AC process.
template <typename Scalar>
Scalar beta_ac(Scalar rho, Scalar s_omega, Scalar s_eps, Scalar s_upsilon, int K, int t) {
  using std::pow;
  const Scalar e2 = s_eps * s_eps, o2 = s_omega * s_omega, u2 = s_upsilon * s_upsilon;
  const Scalar k = Scalar(K), one = Scalar(1), r2 = one - rho * rho;
  const Scalar rt = pow(rho, Scalar(t - 1));
  const Scalar num = rt * (one + rho) * r2 * e2 * e2 + r2 * (one + (k + one - k * rho) * rt) * e2 * o2;
  const Scalar den = (one + rho) * r2 * e2 * e2 + (k + Scalar(2) - k * rho) * r2 * e2 * o2 +
                     (k + one - (k - one) * rho) * o2 * u2 + (one + rho) * e2 * u2;
  return num / den;
}

/// Same for the HR rule: projection on Y_2(0) + upsilon.
template <typename Scalar>
Scalar beta_hr(Scalar rho, Scalar s_omega, Scalar s_eps, Scalar s_upsilon, int K, int t) {
  using std::pow;
  const Scalar e2 = s_eps * s_eps, o2 = s_omega * s_omega, u2 = s_upsilon * s_upsilon;
  const Scalar k = Scalar(K), one = Scalar(1), r2 = one - rho * rho, r4 = one - pow(rho, Scalar(4));
  const Scalar c = k + one - (k - one) * rho + k * rho * rho * (one - rho);
  const Scalar den = (one + rho) * r4 * e2 * e2 + (k + Scalar(2) - (k - Scalar(2)) * rho + k * rho * rho * (one - rho)) * r2 * e2 * o2 +
                     (k + one - (k - one) * rho) * o2 * u2 + (one + rho) * e2 * u2;
  Scalar num;
  if (t == 1) {
    num = r2 * (one + rho) * rho * e2 * e2 + r2 * (one + (k + one - k * rho) * rho) * e2 * o2;
  } else {
    const Scalar rt = pow(rho, Scalar(t - 2));
    num = rt * (one + rho) * r4 * e2 * e2 + r2 * (one + rho + c * rt) * e2 * o2;
  }
  return num / den;
}

/// Full linear projection of Y_t(0) on (1, Z, Y_{-K}, ..., Y_0) with
/// Z = Y_z(0) + upsilon, computed by solving the normal equations of the
/// analytic covariance matrix. Element 0 is the coefficient on Z.
VectorXd projection_coefficients(double rho, const Sigmas& sigma, int K, int t, int z_quarter);

// --- Discrete populations -------------------------------------------------------

/// One support point of a two-period population, repeated `count` times.
struct PopulationRow {
  double x1 = 0.0;      // baseline covariate (earnings at quarter 0)
  int enroll = 0;       // 0 never, 1 or 2
  double y1 = 0.0;      // observed earnings at quarter 1
  double yt = 0.0;      // observed outcome at quarter 2
  double y00 = 0.0;     // untreated potential outcome at quarter 2
  std::size_t count = 1;
};

struct DiscretePopulation {
  std::vector<PopulationRow> rows;
  std::size_t size() const;
};

struct PopulationOptions {
  int max_patterns = 4;  // baseline covariate patterns
  int max_types = 3;     // interim earnings values per pattern
  int max_outcomes = 3;  // outcome values per interim type
  // true: later enrollment is more likely at low interim earnings, which
  // carry low outcomes (Assumption 2 holds). false: reversed.
  bool negative_selection = true;
  bool later_enrollees = true;
};

/// Population where enrollment at 1 is independent of untreated outcomes
/// given x1, and enrollment at 2 is independent of the outcome given
/// (x1, y1), with integer counts so that both hold exactly.
DiscretePopulation random_population(std::mt19937_64& rng, const PopulationOptions& opts = {});

/// Workers with lag y_m0 = x1, interim y_p1 = y1, outcome y_p2 = yt; S = 2.
PanelDataset population_panel(const DiscretePopulation& pop);

/// E[Y_2^{00} | D_1 = 1] by the sequential product over observed data:
/// sum_x P(x | D_1=1) sum_y1 P(y1 | D_1=0, x) E[Y | never, x, y1].
/// Throws OverlapError when a conditioning cell is empty.
double robins_oracle(const DiscretePopulation& pop);

/// Mean of y00 over cohort-1 enrollees (known by construction).
double true_counterfactual(const DiscretePopulation& pop);

struct PopulationTot {
  double treated_mean = kMissing;
  double lower = kMissing;
  double upper = kMissing;
  double lechner = kMissing;  // via the sequential product
  double ipw = kMissing;
  double truth = kMissing;
};

/// Exact population analogs for cohort s (1 or 2) at quarter 2.
PopulationTot enumerate_tot(const DiscretePopulation& pop, int s);

}  // namespace dynmatch

#endif  // DYNMATCH_SIMULATION_HPP
