#ifndef DYNMATCH_PROPENSITY_HPP
#define DYNMATCH_PROPENSITY_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/panel.hpp"

namespace dynmatch {

struct LogitOptions {
  int max_iter = 100;
  double tol = 1e-8;
  double ridge = 0.0;  // > 0 labels the fit as penalized
  // A fit whose linear predictor exceeds this in absolute value while the
  // coefficients are still moving is reported as separated (not converged).
  double separation_eta = 20.0;
};

template <typename Scalar>
struct LogitResult {
  Scalar intercept = 0;
  Vector<Scalar> beta;    // original column scale; 0 for constant columns
  Vector<Scalar> fitted;  // probabilities, one per row
  std::vector<Eigen::Index> constant_columns;
  int iterations = 0;
  bool converged = false;
  bool separated = false;
  bool rank_deficient = false;
  Scalar loglik = 0;
  Scalar max_gradient = 0;
};

template <typename Scalar>
Scalar inverse_logit(Scalar eta) {
  using std::exp;
  return eta >= 0 ? Scalar(1) / (Scalar(1) + exp(-eta)) : exp(eta) / (Scalar(1) + exp(eta));
}

/// ln(p / (1 - p)); throws DomainError outside (0, 1).
double log_odds(double p);

namespace detail {
template <typename Scalar>
Scalar log1p_exp(Scalar x) {
  using std::exp;
  using std::log1p;
  return x > 0 ? x + log1p(exp(-x)) : log1p(exp(x));
}

template <typename Scalar>
Scalar logit_loglik(const Vector<Scalar>& eta, const Vector<Scalar>& y) {
  Scalar ll = 0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - log1p_exp(eta(i));
  return ll;
}
}  // namespace detail

/// Binomial logit by iteratively reweighted least squares. An intercept is
/// always included; constant columns are absorbed into it. Columns are
/// standardized internally and coefficients are mapped back.
template <typename DerivedX, typename DerivedY>
LogitResult<typename DerivedX::Scalar> irls_logit(const Eigen::MatrixBase<DerivedX>& X,
                                                 const Eigen::MatrixBase<DerivedY>& y,
                                                 const LogitOptions& opts = {}) {
  using Scalar = typename DerivedX::Scalar;
  using Mat = Matrix<Scalar>;
  using Vec = Vector<Scalar>;
  using std::abs;
  using std::sqrt;

  const Eigen::Index n = X.rows(), k = X.cols();
  if (y.size() != n) throw DomainError("logit: X and y row counts differ");
  if (n == 0) throw FitError("logit: empty sample");
  if (!X.allFinite()) throw FitError("logit: design matrix has missing or non-finite entries");
  Scalar n1 = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (y(i) != Scalar(0) && y(i) != Scalar(1)) throw DomainError("logit: response must be 0/1");
    n1 += y(i);
  }
  if (n1 == 0 || n1 == Scalar(n)) throw FitError("logit: perfect prediction (response has a single class)");

  LogitResult<Scalar> res;
  std::vector<Eigen::Index> keep;
  Vec mean = X.colwise().mean().transpose();
  Vec sd(k);
  for (Eigen::Index j = 0; j < k; ++j) {
    sd(j) = sqrt((X.col(j).array() - mean(j)).square().sum() / Scalar(n));
    if (X.col(j).maxCoeff() == X.col(j).minCoeff()) res.constant_columns.push_back(j);
    else keep.push_back(j);
  }
  const auto p = static_cast<Eigen::Index>(keep.size()) + 1;
  Mat Z(n, p);
  Z.col(0).setOnes();
  for (Eigen::Index c = 1; c < p; ++c) {
    const auto j = keep[static_cast<std::size_t>(c - 1)];
    Z.col(c) = (X.col(j).array() - mean(j)) / sd(j);
  }
  const Vec yv = y.template cast<Scalar>();

  Eigen::ColPivHouseholderQR<Mat> qr(Z);
  qr.setThreshold(Scalar(1e-10));
  if (qr.rank() < p) {
    res.rank_deficient = true;
    res.beta = Vec::Zero(k);
    res.fitted = Vec::Constant(n, n1 / Scalar(n));
    return res;
  }

  Vec penalty = Vec::Constant(p, Scalar(opts.ridge));
  penalty(0) = 0;
  auto objective = [&](const Vec& b, const Vec& eta) {
    return detail::logit_loglik<Scalar>(eta, yv) - Scalar(0.5) * (penalty.array() * b.array().square()).sum();
  };

  Vec b = Vec::Zero(p);
  b(0) = std::log(n1 / (Scalar(n) - n1));
  Vec eta = Z * b;
  Scalar obj = objective(b, eta);
  Vec prob(n), grad(p);
  Scalar last_move = std::numeric_limits<Scalar>::infinity();
  for (int it = 1; it <= opts.max_iter; ++it) {
    res.iterations = it;
    Vec w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      prob(i) = inverse_logit(eta(i));
      w(i) = prob(i) * (1 - prob(i));
    }
    grad = Z.transpose() * (yv - prob) - (penalty.array() * b.array()).matrix();
    res.max_gradient = grad.cwiseAbs().maxCoeff();
    if (res.max_gradient < Scalar(opts.tol)) {
      res.converged = true;
      break;
    }
    Mat H = Z.transpose() * w.asDiagonal() * Z;
    H.diagonal() += penalty;
    Eigen::LDLT<Mat> ldlt(H);
    if (ldlt.info() != Eigen::Success || !(ldlt.isPositive())) break;
    Vec step = ldlt.solve(grad);
    if (!step.allFinite()) break;

    // Step halving keeps the objective monotone up to rounding noise.
    const Scalar slack = Scalar(1e-12) * (1 + abs(obj));
    Scalar t = 1;
    Vec b_new = b + step, eta_new = Z * b_new;
    Scalar obj_new = objective(b_new, eta_new);
    for (int h = 0; h < 30 && !(obj_new >= obj - slack); ++h) {
      t /= 2;
      b_new = b + t * step;
      eta_new = Z * b_new;
      obj_new = objective(b_new, eta_new);
    }
    const Scalar moved = (t * step).cwiseAbs().maxCoeff();
    last_move = moved;
    b = b_new;
    eta = eta_new;
    obj = obj_new;
    if (t == 1 && moved < Scalar(opts.tol)) {
      res.converged = true;
      break;
    }
  }
  res.loglik = detail::logit_loglik<Scalar>(eta, yv);
  res.fitted.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) res.fitted(i) = inverse_logit(eta(i));
  // Under separation the standardized coefficients keep drifting by O(1) per
  // step while the gradient vanishes; a finite optimum stops moving.
  if (eta.cwiseAbs().maxCoeff() > Scalar(opts.separation_eta) && (!res.converged || last_move > Scalar(1e-4))) {
    res.separated = true;
    res.converged = false;
  }

  res.beta = Vec::Zero(k);
  res.intercept = b(0);
  for (Eigen::Index c = 1; c < p; ++c) {
    const auto j = keep[static_cast<std::size_t>(c - 1)];
    res.beta(j) = b(c) / sd(j);
    res.intercept -= b(c) * mean(j) / sd(j);
  }
  return res;
}

enum class ScoreKind { Conditional, Unconditional, Completer };

const char* to_string(ScoreKind kind);

struct PropensityFit {
  std::string cell_id;
  int cohort = 0;
  ScoreKind score_kind = ScoreKind::Conditional;
  std::vector<std::string> columns;  // covariate names, intercept excluded
  double intercept = 0.0;
  VectorXd coefficients;  // aligned with columns; 0 for dropped/absorbed
  IndexList workers;      // sorted; units with a score
  VectorXd scores;        // aligned with workers
  bool converged = false;
  bool separated = false;
  bool penalized = false;
  std::vector<std::string> dropped_covariates;
  std::vector<std::string> absorbed_constants;
  std::vector<std::string> warnings;
  int iterations = 0;
  std::size_t n_treated = 0;
  std::size_t n_control = 0;
  IndexList dropped_for_perfect_prediction;

  std::optional<double> score(WorkerIndex w) const;
  VectorXd predict(const MatrixXd& X) const;
  /// {cell_id, cohort, n_treated, n_control, converged, dropped_covariates, iterations}
  std::string diagnostics_json() const;
};

/// Plain logit fit on a design matrix. Rows are labeled 0..n-1.
PropensityFit fit_logit(const MatrixXd& X, const VectorXd& y, const LogitOptions& opts = {},
                        std::vector<std::string> columns = {});

/// Drops covariates cumulatively in `drop_order` until the fit converges.
/// Throws FitError when the list is exhausted.
PropensityFit fit_with_fallback(const MatrixXd& X, const VectorXd& y, const std::vector<std::string>& drop_order,
                                const LogitOptions& opts = {}, std::vector<std::string> columns = {});

/// Demographic columns from last-listed backwards, then interim earnings from
/// the latest quarter, then earnings lags starting with the most distant.
std::vector<std::string> default_drop_order(const PanelDataset& data, int s);

/// Rows sharing a value of some 0/1 column whose responses are all one
/// class. Repeated until no such group remains. Returns row positions.
std::vector<Eigen::Index> perfect_prediction_rows(const MatrixXd& X, const VectorXd& y);

struct PropensityOptions {
  LogitOptions logit;
  std::vector<std::string> drop_order;  // empty = default_drop_order
  bool drop_perfect_prediction = true;
};

/// Fits the score of `kind` for cohort `view.cohort` restricted to
/// `members` (a subset of the at-risk set, typically one exact cell) and
/// scores every member eligible for that kind: all at-risk members for
/// p_s and p~_s, treated members with a known completer flag for e_s.
PropensityFit fit_propensity(const PanelDataset& data, const CohortView& view, ScoreKind kind,
                             std::span<const WorkerIndex> members, const PropensityOptions& opts = {},
                             std::string cell_id = {});

struct TrimReport {
  int cohort = 0;
  std::string cell_id;
  IndexList dropped_for_perfect_prediction;
  IndexList dropped_for_high_score;
  IndexList kept;  // treated units that survive
  double threshold_used = 0.99;
  bool empty_result = false;
};

TrimReport trim(const PropensityFit& fit, std::span<const WorkerIndex> treated, double threshold = 0.99);

}  // namespace dynmatch

#endif  // DYNMATCH_PROPENSITY_HPP
