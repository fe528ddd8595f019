#include "dynmatch/propensity.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

namespace dynmatch {

double log_odds(double p) {
  if (!(p > 0.0 && p < 1.0)) throw DomainError("log_odds: probability must lie strictly inside (0, 1)");
  return std::log(p / (1.0 - p));
}

const char* to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::Conditional: return "conditional";
    case ScoreKind::Unconditional: return "unconditional";
    case ScoreKind::Completer: return "completer";
  }
  return "conditional";
}

std::optional<double> PropensityFit::score(WorkerIndex w) const {
  auto it = std::lower_bound(workers.begin(), workers.end(), w);
  if (it == workers.end() || *it != w) return std::nullopt;
  return scores(it - workers.begin());
}

VectorXd PropensityFit::predict(const MatrixXd& X) const {
  if (X.cols() != coefficients.size()) throw DomainError("predict: column count mismatch");
  VectorXd eta = (X * coefficients).array() + intercept;
  return eta.unaryExpr([](double e) { return inverse_logit(e); });
}

std::string PropensityFit::diagnostics_json() const {
  nlohmann::ordered_json j;
  j["cell_id"] = cell_id;
  j["cohort"] = cohort;
  j["n_treated"] = n_treated;
  j["n_control"] = n_control;
  j["converged"] = converged;
  j["dropped_covariates"] = dropped_covariates;
  j["iterations"] = iterations;
  return j.dump();
}

namespace {

std::vector<std::string> default_names(Eigen::Index k) {
  std::vector<std::string> names;
  for (Eigen::Index j = 0; j < k; ++j) names.push_back("x" + std::to_string(j));
  return names;
}

}  // namespace

PropensityFit fit_logit(const MatrixXd& X, const VectorXd& y, const LogitOptions& opts,
                        std::vector<std::string> columns) {
  if (columns.empty()) columns = default_names(X.cols());
  if (static_cast<Eigen::Index>(columns.size()) != X.cols()) throw DomainError("fit_logit: column names mismatch");
  auto r = irls_logit(X, y, opts);
  PropensityFit fit;
  fit.columns = std::move(columns);
  fit.intercept = r.intercept;
  fit.coefficients = r.beta;
  fit.converged = r.converged;
  fit.separated = r.separated;
  fit.penalized = opts.ridge > 0;
  fit.iterations = r.iterations;
  for (auto j : r.constant_columns) {
    fit.absorbed_constants.push_back(fit.columns[static_cast<std::size_t>(j)]);
    fit.warnings.push_back("constant column '" + fit.columns[static_cast<std::size_t>(j)] + "' absorbed into intercept");
  }
  if (r.rank_deficient) fit.warnings.push_back("design is rank deficient");
  if (r.separated) fit.warnings.push_back("separation: fitted probabilities at 0 or 1");
  fit.workers.resize(static_cast<std::size_t>(X.rows()));
  for (std::size_t i = 0; i < fit.workers.size(); ++i) fit.workers[i] = i;
  fit.scores = r.fitted;
  fit.n_treated = static_cast<std::size_t>(y.sum());
  fit.n_control = static_cast<std::size_t>(y.size()) - fit.n_treated;
  return fit;
}

PropensityFit fit_with_fallback(const MatrixXd& X, const VectorXd& y, const std::vector<std::string>& drop_order,
                                const LogitOptions& opts, std::vector<std::string> columns) {
  if (columns.empty()) columns = default_names(X.cols());
  auto fit = fit_logit(X, y, opts, columns);
  if (fit.converged) return fit;

  std::vector<Eigen::Index> active(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) active[static_cast<std::size_t>(j)] = j;
  std::vector<std::string> dropped;
  for (const auto& name : drop_order) {
    auto pos = std::find(columns.begin(), columns.end(), name);
    if (pos == columns.end()) continue;
    const auto j = static_cast<Eigen::Index>(pos - columns.begin());
    auto a = std::find(active.begin(), active.end(), j);
    if (a == active.end()) continue;
    active.erase(a);
    dropped.push_back(name);
    if (active.empty()) break;

    MatrixXd Xr(X.rows(), static_cast<Eigen::Index>(active.size()));
    std::vector<std::string> names;
    for (std::size_t c = 0; c < active.size(); ++c) {
      Xr.col(static_cast<Eigen::Index>(c)) = X.col(active[c]);
      names.push_back(columns[static_cast<std::size_t>(active[c])]);
    }
    auto sub = fit_logit(Xr, y, opts, names);
    if (!sub.converged) continue;

    fit.converged = true;
    fit.separated = false;
    fit.iterations = sub.iterations;
    fit.intercept = sub.intercept;
    fit.coefficients = VectorXd::Zero(X.cols());
    for (std::size_t c = 0; c < active.size(); ++c) fit.coefficients(active[c]) = sub.coefficients(static_cast<Eigen::Index>(c));
    fit.scores = sub.scores;
    fit.dropped_covariates = dropped;
    fit.absorbed_constants = sub.absorbed_constants;
    fit.warnings = sub.warnings;
    return fit;
  }
  throw FitError("logit did not converge after dropping " + std::to_string(dropped.size()) + " covariate(s)");
}

std::vector<std::string> default_drop_order(const PanelDataset& data, int s) {
  std::vector<std::string> demo, lags;
  std::vector<std::pair<int, std::string>> lag_q;
  for (const auto& d : data.covariate_spec.defs) {
    if (d.role == CovariateRole::ExactKey) continue;
    if (d.role == CovariateRole::EarningsLag) {
      lag_q.emplace_back(d.quarter, d.name);
    } else if (d.categorical) {
      auto lv = data.levels(d.name);
      for (std::size_t i = 1; i < lv.size(); ++i) demo.push_back(d.name + "=" + lv[i]);
    } else {
      demo.push_back(d.name);
    }
  }
  std::vector<std::string> order(demo.rbegin(), demo.rend());
  for (int q = s - 1; q >= 1; --q) order.push_back("y_p" + std::to_string(q));
  // Most distant lag goes first.
  std::stable_sort(lag_q.begin(), lag_q.end());
  for (const auto& l : lag_q) order.push_back(l.second);
  return order;
}

std::vector<Eigen::Index> perfect_prediction_rows(const MatrixXd& X, const VectorXd& y) {
  const Eigen::Index n = X.rows();
  std::vector<char> dropped(static_cast<std::size_t>(n), 0);
  bool changed = true;
  while (changed) {
    changed = false;
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      bool binary = true;
      for (Eigen::Index i = 0; i < n && binary; ++i)
        if (!dropped[static_cast<std::size_t>(i)] && X(i, j) != 0.0 && X(i, j) != 1.0) binary = false;
      if (!binary) continue;
      for (double v : {0.0, 1.0}) {
        std::size_t count = 0, remaining = 0, ones = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
          if (dropped[static_cast<std::size_t>(i)]) continue;
          ++remaining;
          if (X(i, j) == v) {
            ++count;
            ones += y(i) == 1.0;
          }
        }
        // A group covering every remaining row means y itself is one class.
        if (count == 0 || count == remaining || (ones != 0 && ones != count)) continue;
        for (Eigen::Index i = 0; i < n; ++i)
          if (X(i, j) == v) dropped[static_cast<std::size_t>(i)] = 1;
        changed = true;
      }
    }
  }
  std::vector<Eigen::Index> out;
  for (Eigen::Index i = 0; i < n; ++i)
    if (dropped[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

PropensityFit fit_propensity(const PanelDataset& data, const CohortView& view, ScoreKind kind,
                             std::span<const WorkerIndex> members, const PropensityOptions& opts,
                             std::string cell_id) {
  const int s = view.cohort;
  IndexList pool, scored;
  std::vector<double> yv;
  IndexList sorted(members.begin(), members.end());
  std::sort(sorted.begin(), sorted.end());
  for (auto w : sorted) {
    if (view.row_of(w) < 0) throw DomainError("fit_propensity: worker is not at risk in cohort " + std::to_string(s));
    const auto& wk = data.workers[w];
    const bool treated = wk.enroll_quarter == s;
    switch (kind) {
      case ScoreKind::Conditional:
        scored.push_back(w);
        if (treated || !wk.enrolled()) {
          pool.push_back(w);
          yv.push_back(treated ? 1.0 : 0.0);
        }
        break;
      case ScoreKind::Unconditional:
        scored.push_back(w);
        pool.push_back(w);
        yv.push_back(treated ? 1.0 : 0.0);
        break;
      case ScoreKind::Completer:
        if (treated && wk.completer) {
          scored.push_back(w);
          pool.push_back(w);
          yv.push_back(*wk.completer ? 1.0 : 0.0);
        }
        break;
    }
  }
  MatrixXd X = view.rows(pool);
  VectorXd y = Eigen::Map<VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));

  IndexList pp;
  if (opts.drop_perfect_prediction && X.rows() > 0) {
    auto rows = perfect_prediction_rows(X, y);
    if (!rows.empty()) {
      std::vector<char> drop(pool.size(), 0);
      for (auto r : rows) {
        drop[static_cast<std::size_t>(r)] = 1;
        pp.push_back(pool[static_cast<std::size_t>(r)]);
      }
      IndexList keep_pool;
      std::vector<double> keep_y;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (drop[i]) continue;
        keep_pool.push_back(pool[i]);
        keep_y.push_back(yv[i]);
      }
      pool = std::move(keep_pool);
      X = view.rows(pool);
      y = Eigen::Map<VectorXd>(keep_y.data(), static_cast<Eigen::Index>(keep_y.size()));
      std::sort(pp.begin(), pp.end());
      IndexList keep_scored;
      std::set_difference(scored.begin(), scored.end(), pp.begin(), pp.end(), std::back_inserter(keep_scored));
      scored = std::move(keep_scored);
    }
  }
  if (pool.empty()) throw FitError("empty fitting pool for cohort " + std::to_string(s));

  const auto order = opts.drop_order.empty() ? default_drop_order(data, s) : opts.drop_order;
  auto fit = fit_with_fallback(X, y, order, opts.logit, view.columns);
  fit.cell_id = std::move(cell_id);
  fit.cohort = s;
  fit.score_kind = kind;
  fit.dropped_for_perfect_prediction = std::move(pp);
  fit.workers = scored;
  fit.scores = fit.predict(view.rows(scored));
  return fit;
}

TrimReport trim(const PropensityFit& fit, std::span<const WorkerIndex> treated, double threshold) {
  if (!(threshold > 0.5 && threshold < 1.0)) throw DomainError("trim threshold must lie in (0.5, 1)");
  TrimReport r;
  r.threshold_used = threshold;
  r.dropped_for_perfect_prediction = fit.dropped_for_perfect_prediction;
  const auto& pp = fit.dropped_for_perfect_prediction;
  for (auto t : treated) {
    if (std::binary_search(pp.begin(), pp.end(), t)) continue;
    auto p = fit.score(t);
    if (!p) throw DomainError("trim: treated worker " + std::to_string(t) + " has no score");
    if (*p > threshold) r.dropped_for_high_score.push_back(t);
    else r.kept.push_back(t);
  }
  r.empty_result = r.kept.empty();
  return r;
}

}  // namespace dynmatch
