#include "dynmatch/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <set>

#include "dynmatch/local_linear.hpp"
#include "dynmatch/text.hpp"

namespace dynmatch {

namespace {

std::string cohort_label(int s) { return "cohort " + std::to_string(s); }

void check_cohort(const PanelDataset& data, int s) {
  if (s < 1 || s > data.window_length)
    throw DomainError("cohort " + std::to_string(s) + " outside 1.." + std::to_string(data.window_length));
}

std::vector<double> outcomes(const PanelDataset& data, int t) {
  const VectorXd y = outcome_at(data, t);
  return {y.data(), y.data() + y.size()};
}

bool kept_contains(const IndexList& kept, WorkerIndex w) { return std::binary_search(kept.begin(), kept.end(), w); }

bool later_than(const Worker& w, int j) { return !w.enrolled() || *w.enroll_quarter > j; }

double checked(std::span<const double> v, WorkerIndex w, const char* what) {
  if (w >= v.size() || is_missing(v[w]))
    throw DomainError(std::string("missing ") + what + " for worker index " + std::to_string(w));
  return v[w];
}

}  // namespace

const char* to_string(EstimandKind kind) {
  switch (kind) {
    case EstimandKind::NowVsLater: return "now_vs_later";
    case EstimandKind::LowerBound: return "lower_bound";
    case EstimandKind::UpperBound: return "upper_bound";
    case EstimandKind::LechnerPoint: return "lechner_point";
    case EstimandKind::Ipw: return "ipw";
    case EstimandKind::CompleterLower: return "completer_lower";
    case EstimandKind::CompleterUpper: return "completer_upper";
    case EstimandKind::Did: return "did";
  }
  return "unknown";
}

std::optional<EstimandKind> parse_estimand(std::string_view name) {
  static const std::pair<std::string_view, EstimandKind> table[] = {
      {"now_vs_later", EstimandKind::NowVsLater}, {"nvl", EstimandKind::NowVsLater},
      {"lower_bound", EstimandKind::LowerBound},  {"lb", EstimandKind::LowerBound},
      {"upper_bound", EstimandKind::UpperBound},  {"ub", EstimandKind::UpperBound},
      {"lechner_point", EstimandKind::LechnerPoint}, {"lechner", EstimandKind::LechnerPoint},
      {"ipw", EstimandKind::Ipw},
      {"completer_lower", EstimandKind::CompleterLower}, {"completer", EstimandKind::CompleterLower},
      {"completer_upper", EstimandKind::CompleterUpper},
      {"did", EstimandKind::Did},
  };
  for (const auto& [n, k] : table)
    if (n == name) return k;
  return std::nullopt;
}

// --- Score book ------------------------------------------------------------

const std::vector<double>& ScoreBook::scores(ScoreKind kind, int s) const {
  if (s < 1 || s > window) throw DomainError("score book has no cohort " + std::to_string(s));
  const auto i = static_cast<std::size_t>(s - 1);
  switch (kind) {
    case ScoreKind::Conditional: return conditional[i];
    case ScoreKind::Unconditional: return unconditional[i];
    default: break;
  }
  throw DomainError("score book holds only enrollment scores");
}

std::vector<double>& ScoreBook::scores(ScoreKind kind, int s) {
  return const_cast<std::vector<double>&>(std::as_const(*this).scores(kind, s));
}

ScoreBook blank_score_book(const PanelDataset& data) {
  ScoreBook book;
  book.window = data.window_length;
  const auto S = static_cast<std::size_t>(data.window_length);
  book.conditional.assign(S, std::vector<double>(data.size(), kMissing));
  book.unconditional.assign(S, std::vector<double>(data.size(), kMissing));
  book.kept.resize(S);
  for (int s = 1; s <= data.window_length; ++s) book.kept[static_cast<std::size_t>(s - 1)] = data.enrollees(s);
  return book;
}

ScoreBook fit_score_book(const PanelDataset& data, const ExactCells& cells, const ScoreBookOptions& opts) {
  ScoreBook book = blank_score_book(data);
  for (auto& k : book.kept) k.clear();
  for (int s = 1; s <= data.window_length; ++s) {
    const CohortView view = build_cohort_view(data, s);
    for (const auto& [key, cell] : cells.cells) {
      const std::string id = ExactCells::cell_id(key);
      IndexList members;
      std::set_intersection(cell.members.begin(), cell.members.end(), view.at_risk.begin(), view.at_risk.end(),
                            std::back_inserter(members));
      if (members.empty()) continue;
      IndexList treated;
      for (auto w : members)
        if (data.workers[w].enroll_quarter == s) treated.push_back(w);

      bool ok = true;
      for (ScoreKind kind : {ScoreKind::Conditional, ScoreKind::Unconditional}) {
        auto& out = book.scores(kind, s);
        const bool conditional = kind == ScoreKind::Conditional;
        std::size_t pool = 0;
        for (auto w : members)
          if (!conditional || !data.workers[w].enrolled() || data.workers[w].enroll_quarter == s) ++pool;
        // A single-class pool has the degenerate fit 0 or 1 everywhere.
        if (treated.empty() || treated.size() == pool) {
          const double v = treated.empty() ? 0.0 : 1.0;
          for (auto w : members) out[w] = v;
          continue;
        }
        try {
          PropensityFit fit = fit_propensity(data, view, kind, members, opts.propensity, id);
          for (Eigen::Index i = 0; i < fit.scores.size(); ++i)
            out[fit.workers[static_cast<std::size_t>(i)]] = fit.scores(i);
          for (auto w : fit.dropped_for_perfect_prediction)
            out[w] = data.workers[w].enroll_quarter == s ? 1.0 : 0.0;
          book.fits.push_back(std::move(fit));
        } catch (const FitError& e) {
          ok = false;
          book.warnings.push_back(cohort_label(s) + ", cell " + id + ": " + to_string(kind) +
                                  " score fit failed (" + e.what() + "); cell skipped");
          for (auto w : members) out[w] = kMissing;
        }
      }
      if (!ok || treated.empty()) continue;

      TrimReport report;
      report.cohort = s;
      report.cell_id = id;
      report.threshold_used = opts.trim_threshold;
      const auto& pc = book.scores(ScoreKind::Conditional, s);
      const auto& pu = book.scores(ScoreKind::Unconditional, s);
      for (auto t : treated) {
        if (pc[t] <= opts.trim_threshold && pu[t] <= opts.trim_threshold) report.kept.push_back(t);
        else if (pc[t] == 1.0 || pu[t] == 1.0) report.dropped_for_perfect_prediction.push_back(t);
        else report.dropped_for_high_score.push_back(t);
      }
      report.empty_result = report.kept.empty();
      auto& kept = book.kept[static_cast<std::size_t>(s - 1)];
      kept.insert(kept.end(), report.kept.begin(), report.kept.end());
      book.trims.push_back(std::move(report));
    }
    std::sort(book.kept[static_cast<std::size_t>(s - 1)].begin(), book.kept[static_cast<std::size_t>(s - 1)].end());
  }
  return book;
}

ScoreBook saturated_score_book(const PanelDataset& data, const ExactCells& cells) {
  ScoreBook book = blank_score_book(data);
  for (int s = 1; s <= data.window_length; ++s) {
    const CohortView view = build_cohort_view(data, s);
    auto& pc = book.scores(ScoreKind::Conditional, s);
    auto& pu = book.scores(ScoreKind::Unconditional, s);
    struct Count {
      double treated = 0, pool = 0, at_risk = 0;
      IndexList members;
    };
    std::map<std::pair<std::vector<std::string>, std::vector<double>>, Count> groups;
    for (auto w : view.at_risk) {
      const auto r = view.row_of(w);
      std::vector<double> key;
      for (Eigen::Index c = 0; c < view.design.cols(); ++c) key.push_back(view.design(r, c));
      auto& g = groups[{cells.cell_of(data, w).key, key}];
      const auto& wk = data.workers[w];
      g.at_risk += 1;
      if (wk.enroll_quarter == s) g.treated += 1;
      if (wk.enroll_quarter == s || !wk.enrolled()) g.pool += 1;
      g.members.push_back(w);
    }
    for (const auto& [key, g] : groups)
      for (auto w : g.members) {
        pc[w] = g.pool > 0 ? g.treated / g.pool : kMissing;
        pu[w] = g.treated / g.at_risk;
      }
    auto& kept = book.kept[static_cast<std::size_t>(s - 1)];
    std::erase_if(kept, [&](WorkerIndex w) { return !(pc[w] < 1.0 && pu[w] < 1.0); });
  }
  return book;
}

// --- Matching by cohort ------------------------------------------------------

CohortMatch match_cohort(const EstimationContext& ctx, int s, ComparisonPool pool) {
  check_cohort(ctx.data, s);
  const auto& kept = ctx.scores.kept[static_cast<std::size_t>(s - 1)];
  const auto& sc = ctx.scores.scores(pool == ComparisonPool::Never ? ScoreKind::Conditional : ScoreKind::Unconditional, s);
  CohortMatch out;
  out.matches.cohort = s;
  out.matches.k = ctx.options.k;
  for (const auto& [key, cell] : ctx.cells.cells) {
    IndexList treated, controls;
    std::vector<double> ts, cs;
    for (auto w : cell.members) {
      const auto& wk = ctx.data.workers[w];
      if (wk.enroll_quarter == s) {
        if (kept_contains(kept, w) && !is_missing(sc[w])) {
          treated.push_back(w);
          ts.push_back(sc[w]);
        }
      } else if (pool == ComparisonPool::Never ? !wk.enrolled() : later_than(wk, s)) {
        if (!is_missing(sc[w])) {
          controls.push_back(w);
          cs.push_back(sc[w]);
        }
      }
    }
    if (treated.empty()) continue;
    const std::string id = ExactCells::cell_id(key);
    if (controls.empty()) {
      out.warnings.push_back(cohort_label(s) + ", cell " + id + ": no comparison units; " +
                             std::to_string(treated.size()) + " enrollees unmatched");
      continue;
    }
    int k = ctx.options.k;
    if (static_cast<std::size_t>(k) > controls.size()) {
      k = static_cast<int>(controls.size());
      out.warnings.push_back(cohort_label(s) + ", cell " + id + ": k reduced to " + std::to_string(k));
    }
    MatchSet ms = nn_match(treated, ts, controls, cs, k, ctx.options.ties);
    ms.cell_id = id;
    ms.cohort = s;
    out.matches.append(ms);
  }
  return out;
}

CohortEstimate evaluate_matches(const MatchSet& matches, std::span<const double> outcome,
                                std::span<const double> control_values, EstimandKind kind, int s, int t) {
  CohortEstimate e;
  e.cohort = s;
  e.quarter = t;
  e.kind = kind;
  std::vector<double> diffs;
  double control_sum = 0.0;
  std::size_t i = 0;
  while (i < matches.pairs.size()) {
    const WorkerIndex tr = matches.pairs[i].treated;
    double c = 0.0;
    for (; i < matches.pairs.size() && matches.pairs[i].treated == tr; ++i)
      c += matches.pairs[i].weight * checked(control_values, matches.pairs[i].control, "control outcome");
    diffs.push_back(checked(outcome, tr, "outcome") - c);
    control_sum += c;
  }
  e.n_treated = diffs.size();
  if (diffs.empty()) return e;
  const double n = static_cast<double>(diffs.size());
  double sum = 0.0;
  for (double d : diffs) sum += d;
  e.value = sum / n;
  e.control_mean = control_sum / n;
  if (diffs.size() > 1) {
    double ss = 0.0;
    for (double d : diffs) ss += (d - e.value) * (d - e.value);
    e.variance = ss / (n - 1) / n;
  }
  return e;
}

CohortEstimate now_vs_later(const EstimationContext& ctx, int s, int t) {
  auto m = match_cohort(ctx, s, ComparisonPool::AtRisk);
  const auto y = outcomes(ctx.data, t);
  auto e = evaluate_matches(m.matches, y, y, EstimandKind::NowVsLater, s, t);
  e.warnings = std::move(m.warnings);
  return e;
}

CohortEstimate tot_lower_bound(const EstimationContext& ctx, int s, int t) {
  auto m = match_cohort(ctx, s, ComparisonPool::Never);
  const auto y = outcomes(ctx.data, t);
  auto e = evaluate_matches(m.matches, y, y, EstimandKind::LowerBound, s, t);
  e.warnings = std::move(m.warnings);
  return e;
}

// --- Upper bound -------------------------------------------------------------

std::vector<double> local_linear_share(std::span<const double> x, std::span<const double> y,
                                       std::span<const double> at) {
  return local_linear<double>(x, y, rule_of_thumb_bandwidth<double>(x), at);
}

std::vector<double> exact_share(std::span<const double> x, std::span<const double> y, std::span<const double> at) {
  return local_linear<double>(x, y, 0.0, at);
}

UpperBoundPlan plan_upper_bound(const EstimationContext& ctx, int s, const ShareFn& share) {
  auto m = match_cohort(ctx, s, ComparisonPool::Never);
  UpperBoundPlan plan;
  plan.cohort = s;
  plan.matches = std::move(m.matches);
  plan.warnings = std::move(m.warnings);
  plan.multiplier.assign(ctx.data.size(), kMissing);
  const auto& sc = ctx.scores.scores(ScoreKind::Conditional, s);

  std::map<std::vector<std::string>, std::set<WorkerIndex>> used;
  for (const auto& p : plan.matches.pairs) used[ctx.cells.cell_of(ctx.data, p.control).key].insert(p.control);

  for (const auto& [key, cell] : ctx.cells.cells) {
    auto it = used.find(key);
    if (it == used.end()) continue;
    std::vector<double> x, y;
    for (auto w : cell.members) {
      const auto& wk = ctx.data.workers[w];
      if (!later_than(wk, s) || is_missing(sc[w])) continue;
      x.push_back(sc[w]);
      y.push_back(wk.enrolled() ? 1.0 : 0.0);
    }
    std::vector<WorkerIndex> controls(it->second.begin(), it->second.end());
    std::vector<double> at;
    for (auto c : controls) at.push_back(sc[c]);
    const auto fitted = share(x, y, at);
    for (std::size_t i = 0; i < controls.size(); ++i) {
      double v = fitted[i];
      if (v < 0.0 || v > 1.0) {
        v = std::clamp(v, 0.0, 1.0);
        ++plan.clipped;
      }
      plan.multiplier[controls[i]] = 1.0 - v;
    }
  }
  if (plan.clipped)
    plan.warnings.push_back(cohort_label(s) + ": " + std::to_string(plan.clipped) +
                            " later-enrollment share estimates clipped to [0, 1]");
  return plan;
}

CohortEstimate evaluate_upper_bound(const UpperBoundPlan& plan, std::span<const double> outcome, int t) {
  std::vector<double> values(outcome.size(), kMissing);
  for (const auto& p : plan.matches.pairs) {
    const double y = checked(outcome, p.control, "control outcome");
    if (y < 0) throw DomainError("upper bound requires non-negative outcomes (worker index " +
                                 std::to_string(p.control) + ")");
    values[p.control] = y * plan.multiplier[p.control];
  }
  auto e = evaluate_matches(plan.matches, outcome, values, EstimandKind::UpperBound, plan.cohort, t);
  e.warnings = plan.warnings;
  return e;
}

CohortEstimate tot_upper_bound(const EstimationContext& ctx, int s, int t, const ShareFn& share) {
  const auto plan = plan_upper_bound(ctx, s, share);
  return evaluate_upper_bound(plan, outcomes(ctx.data, t), t);
}

// --- Sequential matching -----------------------------------------------------

std::vector<double> LechnerPlan::control_values(std::span<const double> outcome) const {
  std::vector<double> values(outcome.begin(), outcome.end());
  // Later enrollments resolve first; their matches enroll later still.
  for (const auto& r : replacements) {
    double v = 0.0;
    for (const auto& [m, w] : r.matches) v += w * checked(values, m, "replacement outcome");
    values[r.unit] = v;
  }
  return values;
}

LechnerPlan plan_lechner(const EstimationContext& ctx, int s) {
  const auto& data = ctx.data;
  auto first = match_cohort(ctx, s, ComparisonPool::AtRisk);
  LechnerPlan plan;
  plan.cohort = s;
  plan.first_step = std::move(first.matches);
  plan.warnings = std::move(first.warnings);

  std::set<WorkerIndex> pending;
  for (const auto& p : plan.first_step.pairs)
    if (data.workers[p.control].enrolled()) pending.insert(p.control);

  auto score_row = [&](WorkerIndex w, int j, Eigen::Index len) -> std::optional<VectorXd> {
    VectorXd row(len);
    for (int i = s; i <= j; ++i) {
      const double v = ctx.scores.scores(ScoreKind::Unconditional, i)[w];
      if (is_missing(v)) return std::nullopt;
      row(i - s) = v;
    }
    return row;
  };

  for (int j = s + 1; j <= data.window_length; ++j) {
    const Eigen::Index dim = j - s + 1;
    std::map<std::vector<std::string>, IndexList> by_cell;
    for (auto w : pending)
      if (data.workers[w].enroll_quarter == j) by_cell[ctx.cells.cell_of(data, w).key].push_back(w);
    for (const auto& [key, units] : by_cell) {
      const auto& cell = ctx.cells.cells.at(key);
      const std::string id = ExactCells::cell_id(key);
      MatrixXd ur(static_cast<Eigen::Index>(units.size()), dim);
      for (std::size_t i = 0; i < units.size(); ++i) {
        auto row = score_row(units[i], j, dim);
        if (!row) throw MatchError(cohort_label(s) + ", cell " + id + ": unit to replace lacks a score");
        ur.row(static_cast<Eigen::Index>(i)) = row->transpose();
      }
      IndexList pool;
      std::vector<VectorXd> rows;
      for (auto w : cell.members) {
        if (!later_than(data.workers[w], j)) continue;
        auto row = score_row(w, j, dim);
        if (!row) continue;
        pool.push_back(w);
        rows.push_back(std::move(*row));
      }
      if (pool.empty())
        throw MatchError(cohort_label(s) + ", cell " + id + ": no units left to replace enrollees of period " +
                         std::to_string(j));
      MatrixXd pr(static_cast<Eigen::Index>(pool.size()), dim);
      for (std::size_t i = 0; i < rows.size(); ++i) pr.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
      int k = std::min<int>(ctx.options.k, static_cast<int>(pool.size()));
      MatchSet ms = mahalanobis_match(units, ur, pool, pr, pooled_covariance(ur, pr), k, ctx.options.ties);
      plan.regularized = plan.regularized || ms.regularized;
      std::size_t i = 0;
      while (i < ms.pairs.size()) {
        LechnerPlan::Replacement rep;
        rep.unit = ms.pairs[i].treated;
        rep.enroll = j;
        for (; i < ms.pairs.size() && ms.pairs[i].treated == rep.unit; ++i) {
          const auto& p = ms.pairs[i];
          rep.matches.emplace_back(p.control, p.weight);
          plan.max_replacement_distance = std::max(plan.max_replacement_distance, p.distance);
          if (data.workers[p.control].enrolled()) pending.insert(p.control);
        }
        plan.replacements.push_back(std::move(rep));
      }
    }
  }
  std::stable_sort(plan.replacements.begin(), plan.replacements.end(),
                   [](const auto& a, const auto& b) { return a.enroll > b.enroll; });
  if (plan.regularized)
    plan.warnings.push_back(cohort_label(s) + ": score-vector covariance regularized during replacement");
  return plan;
}

CohortEstimate evaluate_lechner(const LechnerPlan& plan, std::span<const double> outcome, int t) {
  const auto values = plan.control_values(outcome);
  auto e = evaluate_matches(plan.first_step, outcome, values, EstimandKind::LechnerPoint, plan.cohort, t);
  e.warnings = plan.warnings;
  return e;
}

CohortEstimate lechner_point(const EstimationContext& ctx, int s, int t) {
  return evaluate_lechner(plan_lechner(ctx, s), outcomes(ctx.data, t), t);
}

// --- IPW ---------------------------------------------------------------------

IpwResult ipw_counterfactual(const EstimationContext& ctx, int s, int t) {
  const auto& data = ctx.data;
  check_cohort(data, s);
  const auto& kept = ctx.scores.kept[static_cast<std::size_t>(s - 1)];
  const auto y = outcomes(data, t);
  IpwResult r;
  double weighted = 0.0, treated_sum = 0.0;
  for (const auto& [key, cell] : ctx.cells.cells) {
    IndexList treated;
    for (auto w : cell.enrollees)
      if (data.workers[w].enroll_quarter == s && kept_contains(kept, w)) treated.push_back(w);
    if (treated.empty()) continue;
    bool complete = true;
    for (auto w : cell.never)
      for (int j = s; j <= data.window_length && complete; ++j)
        complete = !is_missing(ctx.scores.scores(ScoreKind::Unconditional, j)[w]);
    if (!complete) continue;
    for (auto w : treated) treated_sum += checked(y, w, "outcome");
    r.n_treated += treated.size();
    for (auto w : cell.never) {
      double denom = 1.0;
      for (int j = s; j <= data.window_length; ++j) denom *= 1.0 - ctx.scores.scores(ScoreKind::Unconditional, j)[w];
      if (denom < ctx.options.ipw_floor) {
        denom = ctx.options.ipw_floor;
        ++r.n_capped;
      }
      const double wt = ctx.scores.scores(ScoreKind::Unconditional, s)[w] / denom;
      r.weight_sum += wt;
      weighted += wt * checked(y, w, "outcome");
    }
  }
  if (r.n_treated == 0) return r;
  r.treated_mean = treated_sum / static_cast<double>(r.n_treated);
  r.counterfactual = weighted / (ctx.options.hajek ? r.weight_sum : static_cast<double>(r.n_treated));
  return r;
}

CohortEstimate ipw_effect(const EstimationContext& ctx, int s, int t) {
  const auto r = ipw_counterfactual(ctx, s, t);
  CohortEstimate e;
  e.cohort = s;
  e.quarter = t;
  e.kind = EstimandKind::Ipw;
  e.n_treated = r.n_treated;
  e.value = r.treated_mean - r.counterfactual;
  e.control_mean = r.counterfactual;
  if (r.n_capped)
    e.warnings.push_back(cohort_label(s) + ": " + std::to_string(r.n_capped) + " IPW denominators capped");
  return e;
}

// --- Completers --------------------------------------------------------------

std::optional<CompleterPlan> plan_completer(const EstimationContext& ctx, int s) {
  const auto& data = ctx.data;
  check_cohort(data, s);
  const auto& kept = ctx.scores.kept[static_cast<std::size_t>(s - 1)];
  const CohortView view = build_cohort_view(data, s);
  CompleterPlan plan;
  plan.cohort = s;
  plan.matches.cohort = s;
  plan.matches.k = ctx.options.k;
  for (const auto& [key, cell] : ctx.cells.cells) {
    IndexList comp;
    for (auto w : cell.enrollees) {
      const auto& wk = data.workers[w];
      if (wk.enroll_quarter == s && kept_contains(kept, w) && wk.completer.value_or(false)) comp.push_back(w);
    }
    if (comp.empty()) continue;
    const std::string id = ExactCells::cell_id(key);
    if (cell.never.empty()) {
      plan.warnings.push_back(cohort_label(s) + ", cell " + id + ": no never-enrollees for completers");
      continue;
    }
    const MatrixXd tr = view.rows(comp), cr = view.rows(cell.never);
    const int k = std::min<int>(ctx.options.k, static_cast<int>(cell.never.size()));
    MatchSet ms = mahalanobis_match(comp, tr, cell.never, cr, pooled_covariance(tr, cr), k, ctx.options.ties);
    ms.cell_id = id;
    ms.cohort = s;
    plan.matches.append(ms);
    plan.completers.insert(plan.completers.end(), comp.begin(), comp.end());
  }
  if (plan.completers.empty()) return std::nullopt;
  std::sort(plan.completers.begin(), plan.completers.end());
  return plan;
}

std::pair<CohortEstimate, CohortEstimate> evaluate_completer(const CompleterPlan& plan,
                                                             std::span<const double> outcome, int t) {
  auto lower = evaluate_matches(plan.matches, outcome, outcome, EstimandKind::CompleterLower, plan.cohort, t);
  lower.warnings = plan.warnings;
  CohortEstimate upper;
  upper.cohort = plan.cohort;
  upper.quarter = t;
  upper.kind = EstimandKind::CompleterUpper;
  upper.n_treated = plan.completers.size();
  const double n = static_cast<double>(plan.completers.size());
  double sum = 0.0;
  for (auto w : plan.completers) {
    const double y = checked(outcome, w, "outcome");
    if (y < 0) throw DomainError("completer upper bound requires non-negative outcomes");
    sum += y;
  }
  upper.value = sum / n;
  upper.control_mean = 0.0;
  if (plan.completers.size() > 1) {
    double ss = 0.0;
    for (auto w : plan.completers) ss += (outcome[w] - upper.value) * (outcome[w] - upper.value);
    upper.variance = ss / (n - 1) / n;
  }
  return {lower, upper};
}

std::optional<std::pair<CohortEstimate, CohortEstimate>> completer_bounds(const EstimationContext& ctx, int s,
                                                                          int t) {
  auto plan = plan_completer(ctx, s);
  if (!plan) return std::nullopt;
  return evaluate_completer(*plan, outcomes(ctx.data, t), t);
}

// --- DiD and reweighting -------------------------------------------------------

CohortEstimate did_estimate(const MatchSet& matches, const PanelDataset& data, int t, int t_pre) {
  const VectorXd post = outcome_at(data, t), pre = outcome_at(data, t_pre);
  std::vector<double> diff(data.size(), kMissing);
  for (const auto& p : matches.pairs) {
    for (WorkerIndex w : {p.treated, p.control}) {
      if (is_missing(pre(static_cast<Eigen::Index>(w))))
        throw DomainError("missing baseline quarter " + std::to_string(t_pre) + " for worker '" +
                          data.workers[w].id + "'");
      diff[w] = checked(std::span<const double>(post.data(), static_cast<std::size_t>(post.size())), w, "outcome") -
                pre(static_cast<Eigen::Index>(w));
    }
  }
  auto e = evaluate_matches(matches, diff, diff, EstimandKind::Did, matches.cohort, t);
  return e;
}

ReweightResult reweighted_effect(const MatchSet& group_m, const MatrixXd& x_m, const MatchSet& group_r,
                                 const MatrixXd& x_r, std::span<const double> outcome, const LogitOptions& opts) {
  const IndexList units_m = group_m.treated_units(), units_r = group_r.treated_units();
  if (static_cast<Eigen::Index>(units_m.size()) != x_m.rows() ||
      static_cast<Eigen::Index>(units_r.size()) != x_r.rows())
    throw DomainError("reweighted_effect: covariate rows do not match treated units");
  if (x_m.cols() != x_r.cols()) throw DomainError("reweighted_effect: covariate columns differ");

  const auto diffs = per_treated_differences(group_m, outcome);
  std::vector<double> weight(units_m.size(), 1.0);
  ReweightResult res;
  if (units_m != units_r) {
    const auto nm = x_m.rows(), nr = x_r.rows();
    MatrixXd X(nm + nr, x_m.cols());
    X << x_m, x_r;
    VectorXd y(nm + nr);
    y.head(nm).setZero();
    y.tail(nr).setOnes();
    std::vector<char> drop(static_cast<std::size_t>(nm + nr), 0);
    for (auto r : perfect_prediction_rows(X, y)) drop[static_cast<std::size_t>(r)] = 1;
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < nm + nr; ++i)
      if (!drop[static_cast<std::size_t>(i)]) keep.push_back(i);
    MatrixXd Xk(static_cast<Eigen::Index>(keep.size()), X.cols());
    VectorXd yk(static_cast<Eigen::Index>(keep.size()));
    double cm = 0, cr = 0;
    for (std::size_t i = 0; i < keep.size(); ++i) {
      Xk.row(static_cast<Eigen::Index>(i)) = X.row(keep[i]);
      yk(static_cast<Eigen::Index>(i)) = y(keep[i]);
      (y(keep[i]) == 1.0 ? cr : cm) += 1.0;
    }
    if (cm == 0 || cr == 0) throw OverlapError("reweighted_effect: no overlap between groups");
    const PropensityFit fit = fit_logit(Xk, yk, opts);
    if (!fit.converged) throw FitError("reweighted_effect: group logit did not converge");
    std::vector<double> p(static_cast<std::size_t>(nm), kMissing);
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (keep[i] < nm) p[static_cast<std::size_t>(keep[i])] = fit.scores(static_cast<Eigen::Index>(i));
    for (std::size_t i = 0; i < units_m.size(); ++i) {
      if (is_missing(p[i]) || p[i] <= 0.0 || p[i] >= 1.0) {
        weight[i] = kMissing;
        ++res.dropped;
        continue;
      }
      weight[i] = p[i] / (1.0 - p[i]) * (cm / cr);
    }
  }

  CohortEstimate& e = res.estimate;
  e.cohort = group_m.cohort;
  e.kind = EstimandKind::LowerBound;
  double sw = 0.0, swd = 0.0;
  for (std::size_t i = 0; i < diffs.size(); ++i) {
    if (is_missing(weight[i])) continue;
    res.weights.emplace_back(units_m[i], weight[i]);
    sw += weight[i];
    swd += weight[i] * diffs[i].second;
    ++e.n_treated;
  }
  if (e.n_treated == 0) return res;
  e.value = swd / sw;
  if (e.n_treated > 1) {
    double ss = 0.0;
    for (std::size_t i = 0; i < diffs.size(); ++i) {
      if (is_missing(weight[i])) continue;
      const double r = weight[i] * (diffs[i].second - e.value);
      ss += r * r;
    }
    e.variance = ss / (sw * sw);
  }
  if (res.dropped)
    e.warnings.push_back(std::to_string(res.dropped) + " treated units dropped for lack of overlap");
  return res;
}

// --- Aggregation ---------------------------------------------------------------

AggregateEstimate aggregate(std::span<const CohortEstimate> components, std::span<const double> shares) {
  if (components.empty()) throw DomainError("aggregate: no components");
  if (components.size() != shares.size()) throw DomainError("aggregate: one share per component required");
  double total = 0.0;
  for (double p : shares) {
    if (!(p >= 0.0)) throw DomainError("aggregate: shares must be non-negative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DomainError("aggregate: shares sum to " + text::format_double(total));
  const auto& first = components.front();
  bool same_tau = true, same_quarter = true;
  for (const auto& c : components) {
    if (c.kind != first.kind) throw DomainError("aggregate: components mix estimand kinds");
    same_tau = same_tau && c.tau() == first.tau();
    same_quarter = same_quarter && c.quarter == first.quarter;
  }
  if (!same_tau && !same_quarter) throw DomainError("aggregate: components are not aligned in time");

  AggregateEstimate a;
  a.kind = first.kind;
  a.event_time = same_tau;
  a.tau = same_tau ? first.tau() : first.quarter;
  a.weights.assign(shares.begin(), shares.end());
  a.components.assign(components.begin(), components.end());
  a.value = 0.0;
  a.variance = 0.0;
  a.control_mean = 0.0;
  for (std::size_t i = 0; i < components.size(); ++i) {
    a.value += shares[i] * components[i].value;
    a.variance += shares[i] * shares[i] * components[i].variance;
    a.control_mean += shares[i] * components[i].control_mean;
  }
  return a;
}

std::vector<double> enrollment_shares(std::span<const CohortEstimate> components) {
  double total = 0.0;
  for (const auto& c : components) total += static_cast<double>(c.n_treated);
  if (total <= 0) throw DomainError("enrollment_shares: no enrollees");
  std::vector<double> out;
  for (const auto& c : components) out.push_back(static_cast<double>(c.n_treated) / total);
  return out;
}

double earnings_percent(double effect, double control_mean) {
  if (!(control_mean > 0)) throw DomainError("earnings_percent: control mean must be positive");
  return 100.0 * effect / control_mean;
}

// --- Bootstrap -------------------------------------------------------------------

std::mt19937_64 replicate_engine(std::uint64_t seed, std::uint64_t replicate) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(replicate), static_cast<std::uint32_t>(replicate >> 32)};
  return std::mt19937_64(seq);
}

IndexList bootstrap_draw(std::size_t n, std::mt19937_64& engine) {
  if (n == 0) throw DomainError("bootstrap: empty sample");
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  IndexList draw(n);
  for (auto& d : draw) d = pick(engine);
  std::sort(draw.begin(), draw.end());
  return draw;
}

BootstrapResult bootstrap(std::size_t n, int reps, std::uint64_t seed,
                          const std::function<std::optional<std::vector<double>>(const IndexList&)>& stat) {
  if (reps < 2) throw DomainError("bootstrap needs at least two replicates");
  BootstrapResult res;
  std::vector<std::vector<double>> draws;
  for (int r = 0; r < reps; ++r) {
    auto engine = replicate_engine(seed, static_cast<std::uint64_t>(r));
    std::optional<std::vector<double>> v;
    try {
      v = stat(bootstrap_draw(n, engine));
    } catch (const Error&) {
      v.reset();
    }
    if (!v) {
      ++res.failed;
      continue;
    }
    if (!draws.empty() && v->size() != draws.front().size())
      throw DomainError("bootstrap statistic changed length between replicates");
    draws.push_back(std::move(*v));
  }
  res.reps = static_cast<int>(draws.size());
  if (draws.empty()) return res;
  const std::size_t q = draws.front().size();
  res.variance.assign(q, kMissing);
  for (std::size_t j = 0; j < q; ++j) {
    double sum = 0.0, count = 0.0;
    for (const auto& d : draws)
      if (!is_missing(d[j])) {
        sum += d[j];
        count += 1.0;
      }
    if (count < 2) continue;
    const double mean = sum / count;
    double ss = 0.0;
    for (const auto& d : draws)
      if (!is_missing(d[j])) ss += (d[j] - mean) * (d[j] - mean);
    res.variance[j] = ss / (count - 1);
  }
  return res;
}

PanelDataset resample(const PanelDataset& data, const IndexList& draw) {
  PanelDataset out;
  out.window_length = data.window_length;
  out.covariate_spec = data.covariate_spec;
  out.time_origin = data.time_origin;
  out.workers.reserve(draw.size());
  for (auto w : draw) out.workers.push_back(data.workers.at(w));
  return out;
}

ScoreBook resample(const ScoreBook& book, const IndexList& draw) {
  ScoreBook out;
  out.window = book.window;
  auto remap = [&](const std::vector<double>& v) {
    std::vector<double> r(draw.size());
    for (std::size_t i = 0; i < draw.size(); ++i) r[i] = v.at(draw[i]);
    return r;
  };
  for (const auto& v : book.conditional) out.conditional.push_back(remap(v));
  for (const auto& v : book.unconditional) out.unconditional.push_back(remap(v));
  for (const auto& k : book.kept) {
    IndexList r;
    for (std::size_t i = 0; i < draw.size(); ++i)
      if (kept_contains(k, draw[i])) r.push_back(i);
    out.kept.push_back(std::move(r));
  }
  return out;
}

// --- Export ----------------------------------------------------------------------

namespace {
std::vector<std::string> estimate_row(const char* kind, const std::string& cohort, int tau, double value,
                                      double variance, std::size_t n, double control_mean) {
  std::string pct;
  if (control_mean > 0 && !is_missing(value)) pct = text::format_double(earnings_percent(value, control_mean));
  return {kind,
          cohort,
          std::to_string(tau),
          text::format_double(value),
          is_missing(variance) ? std::string() : text::format_double(std::sqrt(variance)),
          std::to_string(n),
          pct};
}
}  // namespace

void write_estimates(std::ostream& out, std::span<const CohortEstimate> cohorts,
                     std::span<const AggregateEstimate> aggregates) {
  text::write_csv_record(out, {"estimand", "cohort", "tau", "value", "se", "n_treated", "pct_of_control_mean"});
  for (const auto& e : cohorts)
    text::write_csv_record(out, estimate_row(to_string(e.kind), std::to_string(e.cohort), e.tau(), e.value,
                                             e.variance, e.n_treated, e.control_mean));
  for (const auto& a : aggregates) {
    std::size_t n = 0;
    for (const auto& c : a.components) n += c.n_treated;
    text::write_csv_record(out, estimate_row(to_string(a.kind), "all", a.tau, a.value, a.variance, n, a.control_mean));
  }
}

}  // namespace dynmatch
