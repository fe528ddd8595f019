#ifndef DYNMATCH_DIAGNOSTICS_HPP
#define DYNMATCH_DIAGNOSTICS_HPP

#include <cmath>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/estimators.hpp"
#include "dynmatch/matching.hpp"
#include "dynmatch/panel.hpp"

namespace dynmatch {

/// (mean_e - mean_n) / sqrt((var_e + var_n) / 2). Zero pooled variance gives
/// 0 for equal means and a signed infinity otherwise.
template <typename Scalar>
Scalar normalized_difference(Scalar mean_e, Scalar mean_n, Scalar var_e, Scalar var_n) {
  using std::sqrt;
  const Scalar gap = mean_e - mean_n;
  const Scalar pooled = (var_e + var_n) / Scalar(2);
  if (pooled <= Scalar(0)) {
    if (gap == Scalar(0)) return Scalar(0);
    return gap > 0 ? std::numeric_limits<Scalar>::infinity() : -std::numeric_limits<Scalar>::infinity();
  }
  return gap / sqrt(pooled);
}

enum class BalanceSample { Raw, Matched };
const char* to_string(BalanceSample sample);

struct CovariateBalance {
  std::string name;
  double mean_treated = kMissing;
  double mean_control = kMissing;
  double sd_treated = kMissing;
  double sd_control = kMissing;
  double normalized_difference = kMissing;
  double t_statistic = kMissing;  // Welch
  bool degenerate = false;        // zero pooled variance with unequal means
};

struct BalanceReport {
  BalanceSample sample = BalanceSample::Raw;
  int cohort = 0;
  std::vector<CovariateBalance> rows;

  double mean_abs_difference() const;
};

/// Weighted balance over design rows. Weights act as frequencies (reuse
/// multiplicity for matched controls); sds use the sum of weights minus one.
BalanceReport balance(std::span<const std::string> columns, const MatrixXd& treated, const VectorXd& treated_weights,
                      const MatrixXd& control, const VectorXd& control_weights, BalanceSample sample);

/// Cohort-s enrollees against never-enrollees on X^s.
BalanceReport balance_raw(const PanelDataset& data, int s);
/// Treated units of `matches` against their controls, each control counted
/// with its summed pair weight.
BalanceReport balance_matched(const PanelDataset& data, const MatchSet& matches);

/// Earnings gap between later-enrollees and matched never-enrollees at one
/// interim quarter.
struct InterimDifferential {
  int cohort = 0;   // 0 after aggregation across cohorts
  int lag = 0;      // later-enrollees enroll at cohort + lag
  int quarter = 0;  // interim quarter offset 1..lag (absolute quarter cohort + offset - 1)
  double value = kMissing;
  double se = kMissing;
  std::size_t n = 0;
  double p_value = kMissing;  // two-sided normal
  double p_holm = kMissing;
};

/// Matches workers enrolling at s + l to never-enrollees on p_s within exact
/// cells and reports the gap at each quarter s, ..., s + l - 1. Absent when
/// no such later-enrollee has a score.
std::optional<std::vector<InterimDifferential>> assumption2_test(const EstimationContext& ctx, int s, int l);

/// Combines cohorts per (lag, quarter) with later-enrollee count weights.
std::vector<InterimDifferential> aggregate_interim(std::span<const InterimDifferential> parts);

/// Step-down Holm adjustment, returned in input order.
std::vector<double> holm_adjust(std::span<const double> p_values);

/// Fills p_value from value / se and p_holm over the rows with a p-value.
void attach_p_values(std::vector<InterimDifferential>& rows);

/// Treated units of a match set and their controls as weighted groups
/// aligned at the cohort's enrollment quarter.
std::pair<std::vector<AlignedMember>, std::vector<AlignedMember>> matched_groups(const MatchSet& matches);

struct IndustryComponents {
  int tau = 0;
  double p_same = 0.0;
  double mean_same = kMissing;
  double same = 0.0;  // p_same * mean_same
  double p_diff = 0.0;
  double mean_diff = kMissing;
  double diff = 0.0;
  double p_nonemployed = 0.0;
  double total = 0.0;  // mean earnings; equals same + diff
};

/// Splits mean earnings into employment in the baseline industry and in any
/// other industry; zero earnings count as non-employment. Industry codes are
/// read from the aux series `industry`, the baseline at `base_quarter`.
std::vector<IndustryComponents> industry_switch_decomposition(const PanelDataset& data,
                                                              std::span<const AlignedMember> group,
                                                              const std::string& industry, int tau_min, int tau_max,
                                                              int base_quarter = 0);

struct ExtensiveMargin {
  double weeks_term = 0.0;    // (dW - adjust) * E_N / W_N
  double rate_term = 0.0;     // d(E/W) * W_E
  double adjust_term = 0.0;   // adjust * E_N / W_N
  double share = kMissing;    // weeks_term / dE
};

/// dE = (dW - adjust) E_N/W_N + d(E/W) W_E + adjust E_N/W_N, with
/// E_E = E_N + dE and W_E = W_N + dW.
ExtensiveMargin extensive_margin_decomposition(double d_earnings, double d_weeks, double earnings_n, double weeks_n,
                                               double adjust = 0.0);

struct CompleterComponents {
  int tau = 0;
  double p_completer = 0.0;
  double mean_completer = kMissing;
  double completer = 0.0;
  double mean_noncompleter = kMissing;
  double noncompleter = 0.0;
  double total = 0.0;
};

/// Enrollee earnings split by completion status; each enrollee aligned at
/// its own enrollment quarter.
std::vector<CompleterComponents> completer_decomposition(const PanelDataset& data, std::span<const WorkerIndex> enrollees,
                                                         int tau_min, int tau_max);

struct OverlapReport {
  std::vector<double> edges;  // bins + 1 shared log-odds edges
  std::vector<std::size_t> treated_count;
  std::vector<std::size_t> control_count;
  std::vector<double> treated_density;  // masses summing to 1
  std::vector<double> control_density;
  double threshold = 0.99;
  double treated_above = 0.0;  // share of scores above threshold
  double control_above = 0.0;
};

/// Histograms of log-odds on equal-width bins over the pooled range. A
/// degenerate range gives one bin.
OverlapReport overlap_report(std::span<const double> treated_scores, std::span<const double> control_scores,
                             int bins = 60, double threshold = 0.99);

/// Bin index of `v` for equal-width edges (last bin closed).
std::size_t bin_of(std::span<const double> edges, double v);

struct CdfPoint {
  double value = 0.0;
  double cdf = 0.0;
};

/// Empirical CDF steps at each distinct value.
std::vector<CdfPoint> outcome_cdf(std::span<const double> values, std::span<const double> weights = {});

void write_balance(std::ostream& out, std::span<const BalanceReport> reports);
void write_interim(std::ostream& out, std::span<const InterimDifferential> rows);
void write_overlap(std::ostream& out, const OverlapReport& report, int cohort, bool header = true);

}  // namespace dynmatch

#endif  // DYNMATCH_DIAGNOSTICS_HPP
