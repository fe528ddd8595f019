#ifndef DYNMATCH_PANEL_HPP
#define DYNMATCH_PANEL_HPP

#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "dynmatch/core.hpp"

namespace dynmatch {

/// Values indexed by relative quarter (0 = layoff quarter). Missing quarters
/// are allowed anywhere; storage is a dense window with NaN holes.
class QuarterSeries {
 public:
  void set(int quarter, double value);
  std::optional<double> at(int quarter) const;
  /// Value or NaN.
  double value_or_missing(int quarter) const;
  bool has(int quarter) const { return !is_missing(value_or_missing(quarter)); }
  bool empty() const { return values_.empty(); }
  int first_quarter() const { return first_; }
  int last_quarter() const { return first_ + static_cast<int>(values_.size()) - 1; }

  bool operator==(const QuarterSeries& other) const;

 private:
  int first_ = 0;
  std::vector<double> values_;
};

// Interim earnings Y_1..Y_{s-1} are implied by the cohort and never listed.
enum class CovariateRole { EarningsLag, Demographic, ExactKey };

struct CovariateDef {
  std::string name;
  CovariateRole role = CovariateRole::Demographic;
  bool categorical = false;
  int quarter = 0;  // EarningsLag only: relative quarter of the lag (-k for y_m<k>)

  bool operator==(const CovariateDef&) const = default;
};

/// Ordered covariate list with role tags plus named auxiliary series.
///
/// Text grammar (comma separated): `name:role` where role is one of
///   lag   pre-layoff earnings lag, name must be y_m<k>
///   demo  numeric demographic covariate
///   cat   categorical demographic covariate (indicator expanded)
///   key   exact-matching key (categorical); `layoff_q:key` uses the layoff quarter
///   aux   auxiliary per-quarter series stored as <name>_m<k> / <name>_p<t>
struct CovariateSpec {
  std::vector<CovariateDef> defs;
  std::vector<std::string> aux_series;

  static CovariateSpec parse(std::string_view text);
  std::string to_string() const;

  std::vector<std::string> exact_keys() const;
  const CovariateDef* find(std::string_view name) const;
  bool operator==(const CovariateSpec&) const = default;
};

using CovariateValue = std::variant<double, std::string>;

struct Worker {
  std::string id;
  int layoff_quarter = 0;
  std::optional<int> enroll_quarter;  // 1..S; empty for never-enrollees
  QuarterSeries earnings;
  std::map<std::string, CovariateValue> covariates;
  std::vector<std::string> cell_keys;
  std::optional<bool> completer;
  std::map<std::string, QuarterSeries> aux;

  bool enrolled() const { return enroll_quarter.has_value(); }
  bool operator==(const Worker&) const = default;
};

struct Violation {
  std::size_t row = 0;  // 1-based data row (header excluded)
  std::string field;
  std::string violation;

  bool operator==(const Violation&) const = default;
};

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<Violation> violations);
  const std::vector<Violation>& violations() const { return violations_; }
  /// JSON list of {row, field, violation}.
  std::string to_json() const;

 private:
  std::vector<Violation> violations_;
};

struct PanelDataset {
  std::vector<Worker> workers;
  int window_length = 1;  // S
  CovariateSpec covariate_spec;
  int time_origin = 0;  // calendar quarter of relative quarter 0

  std::size_t size() const { return workers.size(); }
  IndexList enrollees(int s) const;
  IndexList never_enrollees() const;

  /// Sorted levels of a categorical covariate across the whole dataset.
  std::vector<std::string> levels(const std::string& covariate) const;

  /// Recomputes cell keys from the exact-key covariates and checks every
  /// invariant. Returns the list of violations (empty when valid).
  std::vector<Violation> validate();

  bool operator==(const PanelDataset&) const = default;
};

PanelDataset load_panel(const std::string& path, const CovariateSpec& schema, int window);
PanelDataset read_panel(std::istream& in, const CovariateSpec& schema, int window);

/// Long layout: a static table (id, layoff_q, enroll_q, completer, covariates)
/// joined with an `id, rel_quarter, earnings` table.
PanelDataset load_panel_long(const std::string& static_path, const std::string& long_path,
                             const CovariateSpec& schema, int window);

void write_panel(const PanelDataset& data, std::ostream& out);
void write_panel(const PanelDataset& data, const std::string& path);

/// Projection of the dataset onto cohort s.
struct CohortView {
  int cohort = 0;
  IndexList at_risk;   // enroll_quarter not in 1..s-1 (sorted)
  IndexList treated;   // enroll_quarter == s
  IndexList controls;  // never-enrollees
  IndexList later;     // enroll_quarter > s
  MatrixXd design;     // one row per at_risk worker, X^s columns
  std::vector<std::string> columns;
  std::size_t baseline_columns = 0;

  bool empty() const { return treated.empty(); }
  /// Row of `worker` in `design`, or -1 when the worker is not at risk.
  Eigen::Index row_of(WorkerIndex worker) const;
  /// Fitting pool: treated and never-enrollees when `conditional`
  /// (p_s conditions on no enrollment in any other period), otherwise
  /// everyone not yet enrolled (p~_s).
  IndexList fit_pool(bool conditional) const;
  /// Design rows for the given workers (all must be at risk).
  MatrixXd rows(std::span<const WorkerIndex> workers) const;
};

CohortView build_cohort_view(const PanelDataset& data, int s);

/// Names of X^s columns in order, without building the matrix.
std::vector<std::string> design_columns(const PanelDataset& data, int s);

struct AlignedMember {
  WorkerIndex worker = 0;
  int align_quarter = 0;  // relative quarter mapped to event time 0
  double weight = 1.0;
};

struct TrajectoryPoint {
  double mean = kMissing;
  double weight = 0.0;  // sum of weights of contributing workers
  std::size_t count = 0;
};

std::map<int, TrajectoryPoint> event_time_trajectory(const PanelDataset& data,
                                                     std::span<const AlignedMember> group,
                                                     int tau_min, int tau_max);

/// Convenience form: alignment supplied as a map worker -> alignment quarter.
std::map<int, TrajectoryPoint> event_time_trajectory(const PanelDataset& data,
                                                     std::span<const WorkerIndex> group,
                                                     const std::map<WorkerIndex, int>& alignment,
                                                     int tau_min, int tau_max);

/// Earnings of every worker at one relative quarter (NaN when missing).
VectorXd outcome_at(const PanelDataset& data, int quarter);

}  // namespace dynmatch

#endif  // DYNMATCH_PANEL_HPP
