#ifndef DYNMATCH_ESTIMATORS_HPP
#define DYNMATCH_ESTIMATORS_HPP

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/matching.hpp"
#include "dynmatch/panel.hpp"
#include "dynmatch/propensity.hpp"

namespace dynmatch {

enum class EstimandKind { NowVsLater, LowerBound, UpperBound, LechnerPoint, Ipw, CompleterLower, CompleterUpper, Did };

/// Long names (`lower_bound`, ...) used in exports.
const char* to_string(EstimandKind kind);
/// Accepts long names and the CLI short forms lb, ub, lechner, ipw, nvl, did,
/// completer (which expands to both completer bounds elsewhere).
std::optional<EstimandKind> parse_estimand(std::string_view name);

struct CohortEstimate {
  int cohort = 0;
  int quarter = 0;  // absolute relative quarter t; event time is t - cohort
  EstimandKind kind = EstimandKind::LowerBound;
  double value = kMissing;
  double variance = kMissing;  // NaN when not available
  std::size_t n_treated = 0;
  double control_mean = kMissing;  // mean of the counterfactual term
  std::vector<std::string> warnings;

  int tau() const { return quarter - cohort; }
};

struct AggregateEstimate {
  EstimandKind kind = EstimandKind::LowerBound;
  int tau = 0;
  bool event_time = true;  // tau is event time; otherwise an absolute quarter
  double value = kMissing;
  double variance = kMissing;
  double control_mean = kMissing;
  std::vector<double> weights;
  std::vector<CohortEstimate> components;
};

/// Scores per cohort indexed by worker (NaN when not scored), plus the
/// treated units that survive trimming.
struct ScoreBook {
  int window = 0;
  std::vector<std::vector<double>> conditional;    // p_s, [s-1][worker]
  std::vector<std::vector<double>> unconditional;  // p~_s
  std::vector<IndexList> kept;                     // [s-1], sorted
  std::vector<PropensityFit> fits;
  std::vector<TrimReport> trims;
  std::vector<std::string> warnings;

  const std::vector<double>& scores(ScoreKind kind, int s) const;
  std::vector<double>& scores(ScoreKind kind, int s);
};

struct ScoreBookOptions {
  PropensityOptions propensity;
  double trim_threshold = 0.99;
};

/// Fits p_s and p~_s for every cohort and cell. Rows removed for perfect
/// prediction take their group's class (0 or 1) as score. Treated units are
/// kept when both scores are below the trim threshold. Cells whose fit fails
/// are skipped with a warning.
ScoreBook fit_score_book(const PanelDataset& data, const ExactCells& cells, const ScoreBookOptions& opts = {});

/// Scores as enrollment frequencies within each exact covariate pattern of
/// X^s (the saturated-model fit). Treated units with a score of 1 are not kept.
ScoreBook saturated_score_book(const PanelDataset& data, const ExactCells& cells);

/// Empty book for callers that supply scores directly. Every enrollee is kept.
ScoreBook blank_score_book(const PanelDataset& data);

struct EstimatorOptions {
  int k = 1;
  TieMode ties = TieMode::LowestIndex;
  bool hajek = false;           // IPW weight normalization
  double ipw_floor = 1e-6;      // smallest allowed IPW denominator
};

struct EstimationContext {
  const PanelDataset& data;
  const ExactCells& cells;
  const ScoreBook& scores;
  EstimatorOptions options{};
};

enum class ComparisonPool {
  Never,   // D = 0, matched on p_s
  AtRisk,  // D_s = 0 and not enrolled before s, matched on p~_s
};

struct CohortMatch {
  MatchSet matches;
  std::vector<std::string> warnings;
};

/// Matches kept cohort-s enrollees within their exact cells.
CohortMatch match_cohort(const EstimationContext& ctx, int s, ComparisonPool pool);

/// Mean over treated of y_t minus the weighted mean of the matched
/// controls' `control_values`. Variance is the paired-difference variance.
CohortEstimate evaluate_matches(const MatchSet& matches, std::span<const double> outcome,
                                std::span<const double> control_values, EstimandKind kind, int s, int t);

CohortEstimate now_vs_later(const EstimationContext& ctx, int s, int t);
CohortEstimate tot_lower_bound(const EstimationContext& ctx, int s, int t);

/// Smoother used for the later-enrollment share: regression of `y` on `x`
/// evaluated at `at`.
using ShareFn =
    std::function<std::vector<double>(std::span<const double> x, std::span<const double> y, std::span<const double> at)>;

/// Local linear with the rule-of-thumb bandwidth.
std::vector<double> local_linear_share(std::span<const double> x, std::span<const double> y,
                                       std::span<const double> at);
/// Mean of y among observations with exactly the same x (discrete scores).
std::vector<double> exact_share(std::span<const double> x, std::span<const double> y, std::span<const double> at);

struct UpperBoundPlan {
  int cohort = 0;
  MatchSet matches;                // same pairs as the lower bound
  std::vector<double> multiplier;  // by worker; 1 - share, NaN for unmatched workers
  std::size_t clipped = 0;
  std::vector<std::string> warnings;
};

UpperBoundPlan plan_upper_bound(const EstimationContext& ctx, int s, const ShareFn& share = local_linear_share);
/// Throws DomainError when a matched outcome is negative.
CohortEstimate evaluate_upper_bound(const UpperBoundPlan& plan, std::span<const double> outcome, int t);
CohortEstimate tot_upper_bound(const EstimationContext& ctx, int s, int t, const ShareFn& share = local_linear_share);

/// Sequential matching for cohort s. Step 1 matches enrollees to the at-risk
/// pool on p~_s; each matched unit enrolling at j > s is replaced by units
/// not enrolled through j, matched by Mahalanobis distance on
/// (p~_s, ..., p~_j), recursively until only never-enrollees remain.
struct LechnerPlan {
  struct Replacement {
    WorkerIndex unit = 0;
    int enroll = 0;
    std::vector<std::pair<WorkerIndex, double>> matches;  // (unit, weight)
  };
  int cohort = 0;
  MatchSet first_step;
  std::vector<Replacement> replacements;  // sorted by enroll descending
  double max_replacement_distance = 0.0;
  bool regularized = false;
  std::vector<std::string> warnings;

  /// Counterfactual value per worker (NaN outside the plan).
  std::vector<double> control_values(std::span<const double> outcome) const;
};

LechnerPlan plan_lechner(const EstimationContext& ctx, int s);
CohortEstimate evaluate_lechner(const LechnerPlan& plan, std::span<const double> outcome, int t);
CohortEstimate lechner_point(const EstimationContext& ctx, int s, int t);

struct IpwResult {
  double counterfactual = kMissing;  // E[Y_t(0) | D_s = 1]
  double treated_mean = kMissing;
  std::size_t n_treated = 0;
  std::size_t n_capped = 0;
  double weight_sum = 0.0;
};

/// Weight p~_s / prod_{j=s..S} (1 - p~_j) on never-enrollees, normalized by
/// the kept enrollee count (or by the weight sum when options.hajek).
IpwResult ipw_counterfactual(const EstimationContext& ctx, int s, int t);
CohortEstimate ipw_effect(const EstimationContext& ctx, int s, int t);

/// Lower: completers matched to never-enrollees by Mahalanobis distance on
/// X^s. Upper: raw completer mean. Absent when the cohort has no completers.
struct CompleterPlan {
  int cohort = 0;
  MatchSet matches;
  IndexList completers;
  std::vector<std::string> warnings;
};
std::optional<CompleterPlan> plan_completer(const EstimationContext& ctx, int s);
std::pair<CohortEstimate, CohortEstimate> evaluate_completer(const CompleterPlan& plan,
                                                             std::span<const double> outcome, int t);
std::optional<std::pair<CohortEstimate, CohortEstimate>> completer_bounds(const EstimationContext& ctx, int s,
                                                                          int t);

/// Matched difference of y_t - y_{t_pre} within person.
CohortEstimate did_estimate(const MatchSet& matches, const PanelDataset& data, int t, int t_pre);

struct ReweightResult {
  CohortEstimate estimate;
  std::vector<std::pair<WorkerIndex, double>> weights;  // treated unit, weight
  std::size_t dropped = 0;
};

/// Matched difference for group m with each treated unit weighted by
/// Pr(r|X)/Pr(m|X) * Pr(m)/Pr(r), from a logit of r membership on the pooled
/// treated units of both groups. Rows of x_m and x_r align with
/// treated_units() of the respective match sets.
ReweightResult reweighted_effect(const MatchSet& group_m, const MatrixXd& x_m, const MatchSet& group_r,
                                 const MatrixXd& x_r, std::span<const double> outcome,
                                 const LogitOptions& opts = {});

/// value = sum pi_s v_s, variance = sum pi_s^2 var_s.
AggregateEstimate aggregate(std::span<const CohortEstimate> components, std::span<const double> shares);

/// Enrollment shares n_s / sum n over the components.
std::vector<double> enrollment_shares(std::span<const CohortEstimate> components);

double earnings_percent(double effect, double control_mean);

/// Resamples workers with replacement; `stat` returns one value per quantity
/// or nothing when the replicate fails. Replicate r uses an engine seeded
/// from (seed, r), so results do not depend on evaluation order.
struct BootstrapResult {
  std::vector<double> variance;
  int reps = 0;
  int failed = 0;
};

std::mt19937_64 replicate_engine(std::uint64_t seed, std::uint64_t replicate);
IndexList bootstrap_draw(std::size_t n, std::mt19937_64& engine);

BootstrapResult bootstrap(std::size_t n, int reps, std::uint64_t seed,
                          const std::function<std::optional<std::vector<double>>(const IndexList&)>& stat);

/// Dataset and score book restricted to a draw (duplicates allowed).
PanelDataset resample(const PanelDataset& data, const IndexList& draw);
ScoreBook resample(const ScoreBook& book, const IndexList& draw);

/// `estimand,cohort,tau,value,se,n_treated,pct_of_control_mean`. Cohort is
/// "all" for aggregates.
void write_estimates(std::ostream& out, std::span<const CohortEstimate> cohorts,
                     std::span<const AggregateEstimate> aggregates);

}  // namespace dynmatch

#endif  // DYNMATCH_ESTIMATORS_HPP
