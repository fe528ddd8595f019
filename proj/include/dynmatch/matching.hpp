#ifndef DYNMATCH_MATCHING_HPP
#define DYNMATCH_MATCHING_HPP

#include <algorithm>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/panel.hpp"

namespace dynmatch {

/// How controls tied at the k-th distance are handled. LowestIndex keeps
/// exactly k by control index; All keeps every tied control with equal
/// weight (useful on populations with repeated covariate patterns).
enum class TieMode { LowestIndex, All };

struct MatchPair {
  WorkerIndex treated = 0;
  WorkerIndex control = 0;
  double distance = 0.0;
  int rank = 1;         // 1-based order by (distance, control index)
  double weight = 1.0;  // weights of one treated unit sum to 1
};

struct MatchSet {
  std::vector<MatchPair> pairs;  // grouped by treated unit
  int k = 1;
  std::string cell_id;
  int cohort = 0;
  bool with_replacement = true;
  bool regularized = false;  // Mahalanobis covariance needed inflation

  std::map<WorkerIndex, std::size_t> reuse_counts() const;
  IndexList treated_units() const;
  void append(const MatchSet& other);
};

struct ExactCell {
  std::vector<std::string> key;
  IndexList members;
  IndexList enrollees;  // D = 1
  IndexList never;      // D = 0
  bool lacks_treated() const { return enrollees.empty(); }
  bool lacks_controls() const { return never.empty(); }
};

struct ExactCells {
  std::vector<std::string> key_spec;
  std::map<std::vector<std::string>, ExactCell> cells;

  static std::string cell_id(const std::vector<std::string>& key);
  /// Cell containing `worker`.
  const ExactCell& cell_of(const PanelDataset& data, WorkerIndex worker) const;
};

ExactCells partition_cells(const PanelDataset& data, const std::vector<std::string>& keys);

/// Nearest neighbors with replacement on a scalar score. Controls are
/// identified by the ids passed in; ties break toward the lower id.
MatchSet nn_match(std::span<const WorkerIndex> treated, std::span<const double> treated_scores,
                  std::span<const WorkerIndex> controls, std::span<const double> control_scores, int k = 1,
                  TieMode ties = TieMode::LowestIndex);

/// Positional form: treated and controls are labeled by their position.
MatchSet nn_match(std::span<const double> treated_scores, std::span<const double> control_scores, int k = 1,
                  TieMode ties = TieMode::LowestIndex);

/// Maps rows u to L^{-1} u where Sigma = L L^T, so Euclidean distance on
/// whitened rows equals Mahalanobis distance on the originals.
template <typename Scalar>
class Whitener {
 public:
  explicit Whitener(const Matrix<Scalar>& covariance) {
    if (covariance.rows() != covariance.cols() || covariance.rows() == 0)
      throw DomainError("covariance must be square and nonempty");
    Matrix<Scalar> cov = covariance;
    if (!factor(cov)) {
      const Scalar scale = std::max(Scalar(1), cov.diagonal().cwiseAbs().mean());
      cov.diagonal().array() += Scalar(1e-8) * scale;
      regularized_ = true;
      if (!factor(cov)) throw MatchError("covariance is singular even after diagonal inflation");
    }
  }

  template <typename Derived>
  Matrix<Scalar> apply(const Eigen::MatrixBase<Derived>& rows) const {
    Matrix<Scalar> t = rows.transpose();
    llt_.matrixL().solveInPlace(t);
    return t.transpose();
  }

  bool regularized() const { return regularized_; }

 private:
  bool factor(const Matrix<Scalar>& cov) {
    llt_.compute(cov);
    if (llt_.info() != Eigen::Success) return false;
    const Vector<Scalar> d = llt_.matrixLLT().diagonal();
    return d.minCoeff() > Scalar(1e-7) * d.maxCoeff();
  }

  Eigen::LLT<Matrix<Scalar>> llt_;
  bool regularized_ = false;
};

/// Sample covariance of the stacked rows of a and b.
template <typename DerivedA, typename DerivedB>
Matrix<typename DerivedA::Scalar> pooled_covariance(const Eigen::MatrixBase<DerivedA>& a,
                                                    const Eigen::MatrixBase<DerivedB>& b) {
  using Scalar = typename DerivedA::Scalar;
  Matrix<Scalar> all(a.rows() + b.rows(), a.cols());
  all << a, b;
  if (all.rows() < 2) throw DomainError("covariance needs at least two rows");
  Matrix<Scalar> centered = all.rowwise() - all.colwise().mean();
  return (centered.transpose() * centered) / Scalar(all.rows() - 1);
}

/// Nearest neighbors with replacement under the Mahalanobis metric.
MatchSet mahalanobis_match(std::span<const WorkerIndex> treated, const MatrixXd& treated_rows,
                           std::span<const WorkerIndex> controls, const MatrixXd& control_rows,
                           const MatrixXd& covariance, int k = 1, TieMode ties = TieMode::LowestIndex);

struct MatchDifference {
  double mean = kMissing;
  std::optional<double> variance;  // absent when fewer than two treated units
  std::size_t n_treated = 0;
};

/// Mean over treated units of y_t minus the weighted mean of its matched
/// controls; variance is the sample variance of those differences over n.
/// `outcome` is indexed by worker index.
MatchDifference match_difference(const MatchSet& matches, std::span<const double> outcome);

/// Per-treated differences in MatchSet order (one entry per treated unit).
std::vector<std::pair<WorkerIndex, double>> per_treated_differences(const MatchSet& matches,
                                                                    std::span<const double> outcome);

/// `cell_id, cohort, treated_id, control_id, rank, distance`
void write_matches(std::ostream& out, const PanelDataset& data, std::span<const MatchSet> sets);

}  // namespace dynmatch

#endif  // DYNMATCH_MATCHING_HPP
