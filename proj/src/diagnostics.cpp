#include "dynmatch/diagnostics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <ostream>

#include "dynmatch/propensity.hpp"
#include "dynmatch/text.hpp"

namespace dynmatch {

const char* to_string(BalanceSample sample) { return sample == BalanceSample::Raw ? "raw" : "matched"; }

double BalanceReport::mean_abs_difference() const {
  if (rows.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : rows) sum += std::abs(r.normalized_difference);
  return sum / static_cast<double>(rows.size());
}

namespace {

struct Moments {
  double mean = kMissing;
  double var = kMissing;
  double n = 0.0;
};

Moments weighted_moments(const VectorXd& x, const VectorXd& w) {
  Moments m;
  m.n = w.sum();
  if (m.n <= 0) return m;
  m.mean = w.dot(x) / m.n;
  m.var = m.n > 1 ? w.dot((x.array() - m.mean).square().matrix()) / (m.n - 1) : 0.0;
  return m;
}

}  // namespace

BalanceReport balance(std::span<const std::string> columns, const MatrixXd& treated, const VectorXd& treated_weights,
                      const MatrixXd& control, const VectorXd& control_weights, BalanceSample sample) {
  if (treated.cols() != static_cast<Eigen::Index>(columns.size()) || control.cols() != treated.cols())
    throw DomainError("balance: column count mismatch");
  if (treated_weights.size() != treated.rows() || control_weights.size() != control.rows())
    throw DomainError("balance: weight length mismatch");
  BalanceReport rep;
  rep.sample = sample;
  for (Eigen::Index j = 0; j < treated.cols(); ++j) {
    const auto e = weighted_moments(treated.col(j), treated_weights);
    const auto n = weighted_moments(control.col(j), control_weights);
    CovariateBalance b;
    b.name = columns[static_cast<std::size_t>(j)];
    b.mean_treated = e.mean;
    b.mean_control = n.mean;
    b.sd_treated = std::sqrt(e.var);
    b.sd_control = std::sqrt(n.var);
    b.normalized_difference = normalized_difference(e.mean, n.mean, e.var, n.var);
    b.degenerate = std::isinf(b.normalized_difference);
    const double se2 = e.var / e.n + n.var / n.n;
    b.t_statistic = se2 > 0 ? (e.mean - n.mean) / std::sqrt(se2) : (e.mean == n.mean ? 0.0 : b.normalized_difference);
    rep.rows.push_back(std::move(b));
  }
  return rep;
}

BalanceReport balance_raw(const PanelDataset& data, int s) {
  const auto view = build_cohort_view(data, s);
  if (view.treated.empty() || view.controls.empty())
    throw EmptyCohortError("cohort " + std::to_string(s) + ": balance needs enrollees and never-enrollees");
  const MatrixXd t = view.rows(view.treated), c = view.rows(view.controls);
  auto rep = balance(view.columns, t, VectorXd::Ones(t.rows()), c, VectorXd::Ones(c.rows()), BalanceSample::Raw);
  rep.cohort = s;
  return rep;
}

BalanceReport balance_matched(const PanelDataset& data, const MatchSet& matches) {
  const auto view = build_cohort_view(data, matches.cohort);
  const auto treated = matches.treated_units();
  std::map<WorkerIndex, double> reuse;
  for (const auto& p : matches.pairs) reuse[p.control] += p.weight;
  if (treated.empty()) throw EmptyCohortError("cohort " + std::to_string(matches.cohort) + ": no matched pairs");
  IndexList controls;
  VectorXd cw(static_cast<Eigen::Index>(reuse.size()));
  for (const auto& [w, wt] : reuse) {
    cw(static_cast<Eigen::Index>(controls.size())) = wt;
    controls.push_back(w);
  }
  const MatrixXd t = view.rows(treated), c = view.rows(controls);
  auto rep = balance(view.columns, t, VectorXd::Ones(t.rows()), c, cw, BalanceSample::Matched);
  rep.cohort = matches.cohort;
  return rep;
}

std::optional<std::vector<InterimDifferential>> assumption2_test(const EstimationContext& ctx, int s, int l) {
  const auto& data = ctx.data;
  if (s < 1 || l < 1 || s + l > data.window_length)
    throw DomainError("assumption test needs 1 <= s and s + l <= " + std::to_string(data.window_length));
  const auto& sc = ctx.scores.scores(ScoreKind::Conditional, s);
  MatchSet all;
  all.cohort = s;
  for (const auto& [key, cell] : ctx.cells.cells) {
    IndexList later, never;
    std::vector<double> ls, ns;
    for (auto w : cell.members) {
      if (is_missing(sc[w])) continue;
      const auto& e = data.workers[w].enroll_quarter;
      if (e == s + l) {
        later.push_back(w);
        ls.push_back(sc[w]);
      } else if (!e) {
        never.push_back(w);
        ns.push_back(sc[w]);
      }
    }
    if (later.empty() || never.empty()) continue;
    const int k = std::min<int>(ctx.options.k, static_cast<int>(never.size()));
    all.append(nn_match(later, ls, never, ns, k, ctx.options.ties));
  }
  if (all.pairs.empty()) return std::nullopt;
  std::vector<InterimDifferential> out;
  for (int i = 1; i <= l; ++i) {
    const VectorXd y = outcome_at(data, s + i - 1);
    const auto d = match_difference(all, std::span<const double>(y.data(), static_cast<std::size_t>(y.size())));
    InterimDifferential r;
    r.cohort = s;
    r.lag = l;
    r.quarter = i;
    r.value = d.mean;
    r.se = d.variance ? std::sqrt(*d.variance) : kMissing;
    r.n = d.n_treated;
    out.push_back(r);
  }
  return out;
}

std::vector<InterimDifferential> aggregate_interim(std::span<const InterimDifferential> parts) {
  std::map<std::pair<int, int>, std::vector<const InterimDifferential*>> groups;
  for (const auto& p : parts) groups[{p.lag, p.quarter}].push_back(&p);
  std::vector<InterimDifferential> out;
  for (const auto& [key, g] : groups) {
    double n = 0;
    for (auto* p : g) n += static_cast<double>(p->n);
    InterimDifferential r;
    r.lag = key.first;
    r.quarter = key.second;
    r.value = 0.0;
    double var = 0.0;
    for (auto* p : g) {
      const double w = static_cast<double>(p->n) / n;
      r.value += w * p->value;
      var += w * w * p->se * p->se;
      r.n += p->n;
    }
    r.se = std::sqrt(var);
    out.push_back(r);
  }
  return out;
}

std::vector<double> holm_adjust(std::span<const double> p_values) {
  const std::size_t m = p_values.size();
  for (double p : p_values)
    if (!(p >= 0.0 && p <= 1.0)) throw DomainError("holm: p-values must lie in [0, 1]");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return p_values[a] < p_values[b]; });
  std::vector<double> out(m);
  double running = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    running = std::max(running, std::min(1.0, static_cast<double>(m - i) * p_values[order[i]]));
    out[order[i]] = running;
  }
  return out;
}

void attach_p_values(std::vector<InterimDifferential>& rows) {
  std::vector<std::size_t> with_p;
  std::vector<double> ps;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& r = rows[i];
    r.p_value = r.p_holm = kMissing;
    if (is_missing(r.value) || !(r.se > 0)) continue;
    r.p_value = std::erfc(std::abs(r.value / r.se) / std::sqrt(2.0));
    with_p.push_back(i);
    ps.push_back(r.p_value);
  }
  const auto adjusted = holm_adjust(ps);
  for (std::size_t j = 0; j < with_p.size(); ++j) rows[with_p[j]].p_holm = adjusted[j];
}

std::pair<std::vector<AlignedMember>, std::vector<AlignedMember>> matched_groups(const MatchSet& matches) {
  std::vector<AlignedMember> treated;
  std::map<WorkerIndex, double> controls;
  for (auto w : matches.treated_units()) treated.push_back({w, matches.cohort, 1.0});
  for (const auto& p : matches.pairs) controls[p.control] += p.weight;
  std::vector<AlignedMember> c;
  for (const auto& [w, wt] : controls) c.push_back({w, matches.cohort, wt});
  return {treated, c};
}

std::vector<IndustryComponents> industry_switch_decomposition(const PanelDataset& data,
                                                              std::span<const AlignedMember> group,
                                                              const std::string& industry, int tau_min, int tau_max,
                                                              int base_quarter) {
  if (group.empty()) throw EmptyCohortError("industry decomposition: empty group");
  std::vector<IndustryComponents> out;
  for (int tau = tau_min; tau <= tau_max; ++tau) {
    double wsum = 0, w_same = 0, y_same = 0, w_diff = 0, y_diff = 0, w_non = 0;
    for (const auto& m : group) {
      const auto& wk = data.workers[m.worker];
      const int q = m.align_quarter + tau;
      const auto y = wk.earnings.at(q);
      if (!y) throw DomainError("industry decomposition: worker " + wk.id + " lacks earnings at quarter " +
                                std::to_string(q));
      wsum += m.weight;
      if (*y == 0.0) {
        w_non += m.weight;
        continue;
      }
      const auto series = wk.aux.find(industry);
      const auto code = series == wk.aux.end() ? std::nullopt : series->second.at(q);
      const auto base = series == wk.aux.end() ? std::nullopt : series->second.at(base_quarter);
      if (!code || !base)
        throw DomainError("industry decomposition: worker " + wk.id + " employed at quarter " + std::to_string(q) +
                          " without an industry code");
      if (*code == *base) {
        w_same += m.weight;
        y_same += m.weight * *y;
      } else {
        w_diff += m.weight;
        y_diff += m.weight * *y;
      }
    }
    IndustryComponents c;
    c.tau = tau;
    c.p_same = w_same / wsum;
    c.p_diff = w_diff / wsum;
    c.p_nonemployed = w_non / wsum;
    if (w_same > 0) c.mean_same = y_same / w_same;
    if (w_diff > 0) c.mean_diff = y_diff / w_diff;
    c.same = y_same / wsum;
    c.diff = y_diff / wsum;
    c.total = (y_same + y_diff) / wsum;
    out.push_back(c);
  }
  return out;
}

ExtensiveMargin extensive_margin_decomposition(double d_earnings, double d_weeks, double earnings_n, double weeks_n,
                                               double adjust) {
  if (weeks_n <= 0) throw DomainError("extensive margin: comparison weeks must be positive");
  const double weeks_e = weeks_n + d_weeks;
  if (weeks_e <= 0) throw DomainError("extensive margin: enrollee weeks must be positive");
  const double wage_n = earnings_n / weeks_n;
  const double wage_e = (earnings_n + d_earnings) / weeks_e;
  ExtensiveMargin r;
  r.weeks_term = (d_weeks - adjust) * wage_n;
  r.adjust_term = adjust * wage_n;
  r.rate_term = (wage_e - wage_n) * weeks_e;
  if (d_earnings != 0.0) r.share = r.weeks_term / d_earnings;
  return r;
}

std::vector<CompleterComponents> completer_decomposition(const PanelDataset& data, std::span<const WorkerIndex> enrollees,
                                                         int tau_min, int tau_max) {
  if (enrollees.empty()) throw EmptyCohortError("completer decomposition: no enrollees");
  std::vector<CompleterComponents> out;
  for (int tau = tau_min; tau <= tau_max; ++tau) {
    double n = 0, nc = 0, yc = 0, ync = 0;
    for (auto w : enrollees) {
      const auto& wk = data.workers[w];
      if (!wk.enrolled() || !wk.completer)
        throw DomainError("completer decomposition: worker " + wk.id + " is not an enrollee with a completer flag");
      const int q = *wk.enroll_quarter + tau;
      const auto y = wk.earnings.at(q);
      if (!y) throw DomainError("completer decomposition: worker " + wk.id + " lacks earnings at quarter " +
                                std::to_string(q));
      n += 1;
      if (*wk.completer) {
        nc += 1;
        yc += *y;
      } else {
        ync += *y;
      }
    }
    CompleterComponents c;
    c.tau = tau;
    c.p_completer = nc / n;
    if (nc > 0) c.mean_completer = yc / nc;
    if (n > nc) c.mean_noncompleter = ync / (n - nc);
    c.completer = yc / n;
    c.noncompleter = ync / n;
    c.total = (yc + ync) / n;
    out.push_back(c);
  }
  return out;
}

std::size_t bin_of(std::span<const double> edges, double v) {
  const std::size_t bins = edges.size() - 1;
  const double lo = edges.front(), hi = edges.back();
  if (hi == lo) return 0;
  const auto i = static_cast<std::ptrdiff_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(bins)));
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(i, 0, static_cast<std::ptrdiff_t>(bins) - 1));
}

OverlapReport overlap_report(std::span<const double> treated_scores, std::span<const double> control_scores, int bins,
                             double threshold) {
  if (bins < 1) throw DomainError("overlap: bins must be positive");
  std::vector<double> lt, lc;
  for (double p : treated_scores) lt.push_back(log_odds(p));
  for (double p : control_scores) lc.push_back(log_odds(p));
  if (lt.empty() && lc.empty()) throw DomainError("overlap: no scores");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&lt, &lc})
    for (double x : *v) lo = std::min(lo, x), hi = std::max(hi, x);
  OverlapReport r;
  r.threshold = threshold;
  const int nb = hi == lo ? 1 : bins;
  for (int i = 0; i <= nb; ++i) r.edges.push_back(i == nb ? hi : lo + (hi - lo) * i / nb);
  r.treated_count.assign(static_cast<std::size_t>(nb), 0);
  r.control_count.assign(static_cast<std::size_t>(nb), 0);
  for (double x : lt) ++r.treated_count[bin_of(r.edges, x)];
  for (double x : lc) ++r.control_count[bin_of(r.edges, x)];
  auto density = [](const std::vector<std::size_t>& c, std::size_t n) {
    std::vector<double> d(c.size(), 0.0);
    if (n > 0)
      for (std::size_t i = 0; i < c.size(); ++i) d[i] = static_cast<double>(c[i]) / static_cast<double>(n);
    return d;
  };
  r.treated_density = density(r.treated_count, lt.size());
  r.control_density = density(r.control_count, lc.size());
  auto above = [&](std::span<const double> v) {
    if (v.empty()) return 0.0;
    return static_cast<double>(std::count_if(v.begin(), v.end(), [&](double p) { return p > threshold; })) /
           static_cast<double>(v.size());
  };
  r.treated_above = above(treated_scores);
  r.control_above = above(control_scores);
  return r;
}

std::vector<CdfPoint> outcome_cdf(std::span<const double> values, std::span<const double> weights) {
  if (values.empty()) throw DomainError("outcome cdf: empty group");
  if (!weights.empty() && weights.size() != values.size()) throw DomainError("outcome cdf: weight length mismatch");
  std::vector<std::pair<double, double>> v;
  double total = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (is_missing(values[i])) throw DomainError("outcome cdf: missing value");
    const double w = weights.empty() ? 1.0 : weights[i];
    v.emplace_back(values[i], w);
    total += w;
  }
  std::sort(v.begin(), v.end());
  std::vector<CdfPoint> out;
  double cum = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    cum += v[i].second;
    if (i + 1 < v.size() && v[i + 1].first == v[i].first) continue;
    out.push_back({v[i].first, i + 1 == v.size() ? 1.0 : cum / total});
  }
  return out;
}

void write_balance(std::ostream& out, std::span<const BalanceReport> reports) {
  using text::format_double;
  text::write_csv_record(out, {"cohort", "sample", "covariate", "mean_treated", "mean_control", "sd_treated",
                               "sd_control", "normalized_difference", "t_statistic"});
  for (const auto& r : reports)
    for (const auto& b : r.rows)
      text::write_csv_record(out, {std::to_string(r.cohort), to_string(r.sample), b.name, format_double(b.mean_treated),
                                   format_double(b.mean_control), format_double(b.sd_treated),
                                   format_double(b.sd_control), format_double(b.normalized_difference),
                                   format_double(b.t_statistic)});
}

void write_interim(std::ostream& out, std::span<const InterimDifferential> rows) {
  using text::format_double;
  text::write_csv_record(out, {"cohort", "lag", "interim_quarter", "difference", "se", "n_later", "p_value", "p_holm"});
  for (const auto& r : rows)
    text::write_csv_record(out, {r.cohort == 0 ? std::string("all") : std::to_string(r.cohort), std::to_string(r.lag),
                                 std::to_string(r.quarter), format_double(r.value), format_double(r.se),
                                 std::to_string(r.n), format_double(r.p_value), format_double(r.p_holm)});
}

void write_overlap(std::ostream& out, const OverlapReport& report, int cohort, bool header) {
  using text::format_double;
  if (header)
    text::write_csv_record(out, {"cohort", "bin", "lo", "hi", "treated_count", "control_count", "treated_density",
                                 "control_density"});
  for (std::size_t i = 0; i < report.treated_count.size(); ++i)
    text::write_csv_record(out, {std::to_string(cohort), std::to_string(i), format_double(report.edges[i]),
                                 format_double(report.edges[i + 1]), std::to_string(report.treated_count[i]),
                                 std::to_string(report.control_count[i]), format_double(report.treated_density[i]),
                                 format_double(report.control_density[i])});
}

}  // namespace dynmatch
