#include "dynmatch/matching.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <ostream>

#include "dynmatch/text.hpp"

namespace dynmatch {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Candidate {
  double distance;  // squared for Mahalanobis search, absolute for scalar
  WorkerIndex id;
  bool operator<(const Candidate& o) const { return distance != o.distance ? distance < o.distance : id < o.id; }
};

void check_k(int k, std::size_t n_controls) {
  if (k < 1) throw DomainError("number of neighbors must be at least 1");
  if (n_controls == 0) throw MatchError("empty control pool");
  if (static_cast<std::size_t>(k) > n_controls)
    throw MatchError("k = " + std::to_string(k) + " exceeds the control pool size " + std::to_string(n_controls));
}

// `found` holds every candidate within the k-th smallest distance, sorted.
void emit(MatchSet& out, WorkerIndex treated, std::vector<Candidate>& found, int k, TieMode ties, bool squared) {
  std::sort(found.begin(), found.end());
  const double kth = found[static_cast<std::size_t>(k - 1)].distance;
  std::size_t m = static_cast<std::size_t>(k);
  if (ties == TieMode::All)
    while (m < found.size() && found[m].distance == kth) ++m;
  for (std::size_t r = 0; r < m; ++r) {
    double d = squared ? std::sqrt(found[r].distance) : found[r].distance;
    out.pairs.push_back({treated, found[r].id, d, static_cast<int>(r + 1), 1.0 / static_cast<double>(m)});
  }
}

}  // namespace

std::map<WorkerIndex, std::size_t> MatchSet::reuse_counts() const {
  std::map<WorkerIndex, std::size_t> counts;
  for (const auto& p : pairs) ++counts[p.control];
  return counts;
}

IndexList MatchSet::treated_units() const {
  IndexList out;
  for (const auto& p : pairs)
    if (out.empty() || out.back() != p.treated) out.push_back(p.treated);
  return out;
}

void MatchSet::append(const MatchSet& other) {
  pairs.insert(pairs.end(), other.pairs.begin(), other.pairs.end());
  regularized = regularized || other.regularized;
}

std::string ExactCells::cell_id(const std::vector<std::string>& key) {
  if (key.empty()) return "all";
  std::string id;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (i) id += '|';
    id += key[i];
  }
  return id;
}

namespace {
std::vector<std::string> key_of(const PanelDataset& data, WorkerIndex w, const std::vector<std::string>& keys) {
  std::vector<std::string> key;
  const auto& wk = data.workers[w];
  for (const auto& k : keys) {
    if (k == "layoff_q") {
      key.push_back(std::to_string(wk.layoff_quarter));
      continue;
    }
    auto it = wk.covariates.find(k);
    if (it == wk.covariates.end()) throw SchemaError("worker '" + wk.id + "' lacks exact key '" + k + "'");
    const auto* s = std::get_if<std::string>(&it->second);
    key.push_back(s ? *s : text::format_double(std::get<double>(it->second)));
  }
  return key;
}
}  // namespace

const ExactCell& ExactCells::cell_of(const PanelDataset& data, WorkerIndex worker) const {
  return cells.at(key_of(data, worker, key_spec));
}

ExactCells partition_cells(const PanelDataset& data, const std::vector<std::string>& keys) {
  for (const auto& k : keys) {
    if (k == "layoff_q") continue;
    const auto* def = data.covariate_spec.find(k);
    if (!def) throw SchemaError("unknown exact key '" + k + "'");
    if (!def->categorical) throw SchemaError("exact key '" + k + "' is continuous; keys must be categorical");
  }
  ExactCells out;
  out.key_spec = keys;
  for (WorkerIndex w = 0; w < data.workers.size(); ++w) {
    auto& cell = out.cells[key_of(data, w, keys)];
    cell.members.push_back(w);
    (data.workers[w].enrolled() ? cell.enrollees : cell.never).push_back(w);
  }
  for (auto& [key, cell] : out.cells) cell.key = key;
  return out;
}

MatchSet nn_match(std::span<const WorkerIndex> treated, std::span<const double> treated_scores,
                  std::span<const WorkerIndex> controls, std::span<const double> control_scores, int k,
                  TieMode ties) {
  if (treated.size() != treated_scores.size() || controls.size() != control_scores.size())
    throw DomainError("nn_match: ids and scores differ in length");
  check_k(k, controls.size());
  auto finite = [](double v) { return std::isfinite(v); };
  if (!std::all_of(treated_scores.begin(), treated_scores.end(), finite) ||
      !std::all_of(control_scores.begin(), control_scores.end(), finite))
    throw DomainError("nn_match: scores must be finite");

  std::vector<std::size_t> order(controls.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return control_scores[a] != control_scores[b] ? control_scores[a] < control_scores[b] : controls[a] < controls[b];
  });
  std::vector<double> sorted(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) sorted[i] = control_scores[order[i]];

  MatchSet out;
  out.k = k;
  std::vector<Candidate> found;
  for (std::size_t t = 0; t < treated.size(); ++t) {
    const double x = treated_scores[t];
    found.clear();
    auto pos = static_cast<std::ptrdiff_t>(std::lower_bound(sorted.begin(), sorted.end(), x) - sorted.begin());
    std::ptrdiff_t lo = pos - 1, hi = pos;
    const auto n = static_cast<std::ptrdiff_t>(sorted.size());
    double kth = kInf;
    // Frontiers advance in nondecreasing distance, so the k-th taken is the
    // k-th smallest; keep going while candidates tie with it.
    while (lo >= 0 || hi < n) {
      const double dl = lo >= 0 ? x - sorted[static_cast<std::size_t>(lo)] : kInf;
      const double dh = hi < n ? sorted[static_cast<std::size_t>(hi)] - x : kInf;
      const double d = std::min(dl, dh);
      if (static_cast<int>(found.size()) >= k && d > kth) break;
      const std::size_t idx = static_cast<std::size_t>(dl <= dh ? lo-- : hi++);
      found.push_back({d, controls[order[idx]]});
      if (static_cast<int>(found.size()) == k) kth = d;
    }
    emit(out, treated[t], found, k, ties, false);
  }
  return out;
}

MatchSet nn_match(std::span<const double> treated_scores, std::span<const double> control_scores, int k,
                  TieMode ties) {
  IndexList t(treated_scores.size()), c(control_scores.size());
  std::iota(t.begin(), t.end(), 0);
  std::iota(c.begin(), c.end(), 0);
  return nn_match(t, treated_scores, c, control_scores, k, ties);
}

MatchSet mahalanobis_match(std::span<const WorkerIndex> treated, const MatrixXd& treated_rows,
                           std::span<const WorkerIndex> controls, const MatrixXd& control_rows,
                           const MatrixXd& covariance, int k, TieMode ties) {
  if (static_cast<Eigen::Index>(treated.size()) != treated_rows.rows() ||
      static_cast<Eigen::Index>(controls.size()) != control_rows.rows())
    throw DomainError("mahalanobis_match: ids and rows differ in length");
  if (treated_rows.cols() != covariance.rows() || control_rows.cols() != covariance.rows())
    throw DomainError("mahalanobis_match: dimension mismatch");
  check_k(k, controls.size());
  if (!treated_rows.allFinite() || !control_rows.allFinite()) throw DomainError("mahalanobis_match: rows must be finite");

  Whitener<double> whiten(covariance);
  const MatrixXd zt = whiten.apply(treated_rows);
  const MatrixXd zc = whiten.apply(control_rows);

  // Sweep outward along the first whitened coordinate and prune once that
  // coordinate alone exceeds the current k-th distance.
  std::vector<std::size_t> order(controls.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    double xa = zc(static_cast<Eigen::Index>(a), 0), xb = zc(static_cast<Eigen::Index>(b), 0);
    return xa != xb ? xa < xb : controls[a] < controls[b];
  });
  std::vector<double> first(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) first[i] = zc(static_cast<Eigen::Index>(order[i]), 0);

  MatchSet out;
  out.k = k;
  out.regularized = whiten.regularized();
  std::vector<Candidate> best;
  const auto n = static_cast<std::ptrdiff_t>(order.size());
  for (std::size_t t = 0; t < treated.size(); ++t) {
    const auto row = zt.row(static_cast<Eigen::Index>(t));
    const double x = row(0);
    best.clear();
    double kth = kInf;
    auto consider = [&](std::size_t idx) {
      const auto c = static_cast<Eigen::Index>(order[idx]);
      const double d2 = (zc.row(c) - row).squaredNorm();
      if (d2 > kth) return;
      Candidate cand{d2, controls[order[idx]]};
      best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
      if (static_cast<int>(best.size()) >= k) {
        kth = best[static_cast<std::size_t>(k - 1)].distance;
        while (best.size() > static_cast<std::size_t>(k) && best.back().distance > kth) best.pop_back();
      }
    };
    auto pos = static_cast<std::ptrdiff_t>(std::lower_bound(first.begin(), first.end(), x) - first.begin());
    for (std::ptrdiff_t i = pos - 1; i >= 0; --i) {
      const double dx = x - first[static_cast<std::size_t>(i)];
      if (dx * dx > kth) break;
      consider(static_cast<std::size_t>(i));
    }
    for (std::ptrdiff_t i = pos; i < n; ++i) {
      const double dx = first[static_cast<std::size_t>(i)] - x;
      if (dx * dx > kth) break;
      consider(static_cast<std::size_t>(i));
    }
    emit(out, treated[t], best, k, ties, true);
  }
  return out;
}

std::vector<std::pair<WorkerIndex, double>> per_treated_differences(const MatchSet& matches,
                                                                    std::span<const double> outcome) {
  auto value = [&](WorkerIndex w) {
    if (w >= outcome.size() || is_missing(outcome[w]))
      throw DomainError("missing outcome for worker index " + std::to_string(w));
    return outcome[w];
  };
  std::vector<std::pair<WorkerIndex, double>> out;
  std::size_t i = 0;
  while (i < matches.pairs.size()) {
    const WorkerIndex t = matches.pairs[i].treated;
    double control_mean = 0.0;
    for (; i < matches.pairs.size() && matches.pairs[i].treated == t; ++i)
      control_mean += matches.pairs[i].weight * value(matches.pairs[i].control);
    out.emplace_back(t, value(t) - control_mean);
  }
  return out;
}

MatchDifference match_difference(const MatchSet& matches, std::span<const double> outcome) {
  auto diffs = per_treated_differences(matches, outcome);
  MatchDifference r;
  r.n_treated = diffs.size();
  if (diffs.empty()) return r;
  double sum = 0.0;
  for (const auto& d : diffs) sum += d.second;
  const double n = static_cast<double>(diffs.size());
  r.mean = sum / n;
  if (diffs.size() > 1) {
    double ss = 0.0;
    for (const auto& d : diffs) ss += (d.second - r.mean) * (d.second - r.mean);
    r.variance = ss / (n - 1) / n;
  }
  return r;
}

void write_matches(std::ostream& out, const PanelDataset& data, std::span<const MatchSet> sets) {
  text::write_csv_record(out, {"cell_id", "cohort", "treated_id", "control_id", "rank", "distance"});
  for (const auto& set : sets)
    for (const auto& p : set.pairs)
      text::write_csv_record(out, {set.cell_id, std::to_string(set.cohort), data.workers[p.treated].id,
                                   data.workers[p.control].id, std::to_string(p.rank),
                                   text::format_double(p.distance)});
}

}  // namespace dynmatch
