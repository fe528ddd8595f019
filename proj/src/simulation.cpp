#include "dynmatch/simulation.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <set>

namespace dynmatch {

void SimConfig::validate() const {
  if (n_workers == 0) throw DomainError("simulation: n_workers must be positive");
  if (S < 1) throw DomainError("simulation: S must be at least 1");
  if (K < 0) throw DomainError("simulation: K must be non-negative");
  if (!(rho > -1.0 && rho < 1.0)) throw DomainError("simulation: rho must lie in (-1, 1)");
  if (!(sigma.omega >= 0 && sigma.eps >= 0 && sigma.upsilon >= 0))
    throw DomainError("simulation: standard deviations must be non-negative");
  if (k < 1 || d1_lag < 1) throw DomainError("simulation: selection lags must be at least 1");
  if (ybar.empty()) throw DomainError("simulation: at least one AC threshold is required");
  if (rule == SelectionRule::HR && !(hr_r > 0)) throw DomainError("simulation: HR interest rate must be positive");
  if (horizon < 0) throw DomainError("simulation: horizon must be non-negative");
}

double SimConfig::effect(int tau, bool completer) const {
  if (tau < 0) return 0.0;
  if (static_cast<std::size_t>(tau) < lock_in.size()) return lock_in[static_cast<std::size_t>(tau)];
  if (completers) return completer ? completer_alpha : noncompleter_alpha;
  return alpha;
}

namespace {

int first_quarter(const SimConfig& cfg) {
  int q = std::min(-cfg.K, 1 - cfg.d1_lag);
  if (cfg.S >= 2 && cfg.rule == SelectionRule::AC) q = std::min(q, 2 - cfg.k);
  return std::min(q, 0);
}

double threshold(const SimConfig& cfg, int s) {
  const auto i = std::min(static_cast<std::size_t>(s - 2), cfg.ybar.size() - 1);
  return cfg.ybar[i];
}

}  // namespace

LatentPanel simulate_latent(const SimConfig& cfg) {
  cfg.validate();
  LatentPanel lp;
  lp.first_quarter = first_quarter(cfg);
  lp.last_quarter = cfg.S + cfg.horizon;
  const auto n = static_cast<Eigen::Index>(cfg.n_workers);
  const Eigen::Index nq = lp.last_quarter - lp.first_quarter + 1;
  lp.y0.resize(n, nq);
  lp.upsilon.resize(n, cfg.S);
  lp.enroll.assign(cfg.n_workers, 0);
  lp.completer.assign(cfg.n_workers, 0);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  const double innovation = cfg.sigma.eps * std::sqrt(1.0 - cfg.rho * cfg.rho);
  std::vector<double> lambda(static_cast<std::size_t>(nq));
  for (Eigen::Index c = 0; c < nq; ++c) {
    auto it = cfg.lambda_by_quarter.find(lp.first_quarter + static_cast<int>(c));
    lambda[static_cast<std::size_t>(c)] = it == cfg.lambda_by_quarter.end() ? cfg.lambda : it->second;
  }

  for (Eigen::Index i = 0; i < n; ++i) {
    const double omega = cfg.sigma.omega * z(rng);
    double eps = cfg.sigma.eps * z(rng);  // stationary start
    for (Eigen::Index c = 0; c < nq; ++c) {
      if (c > 0) eps = cfg.rho * eps + innovation * z(rng);
      lp.y0(i, c) = omega + lambda[static_cast<std::size_t>(c)] + eps;
    }
    for (int s = 1; s <= cfg.S; ++s) lp.upsilon(i, s - 1) = cfg.sigma.upsilon * z(rng);
    const double eta = cfg.completer_noise * z(rng);
    lp.completer[static_cast<std::size_t>(i)] = cfg.completers && omega + eta < cfg.completer_cut;

    for (int s = 1; s <= cfg.S; ++s) {
      const double u = lp.upsilon(i, s - 1);
      bool enroll;
      if (s == 1) enroll = lp.at(static_cast<std::size_t>(i), 1 - cfg.d1_lag) + u < cfg.d1_ybar;
      else if (cfg.rule == SelectionRule::AC) enroll = lp.at(static_cast<std::size_t>(i), s - cfg.k) + u < threshold(cfg, s);
      else enroll = lp.at(static_cast<std::size_t>(i), s) + u < cfg.hr_alpha / cfg.hr_r;
      if (enroll) {
        lp.enroll[static_cast<std::size_t>(i)] = s;
        break;
      }
    }
  }
  return lp;
}

std::pair<PanelDataset, SimTruth> simulate_panel(const SimConfig& cfg) {
  const LatentPanel lp = simulate_latent(cfg);
  PanelDataset data;
  data.window_length = cfg.S;
  for (int k = cfg.K; k >= 0; --k) {
    CovariateDef def;
    def.name = "y_m" + std::to_string(k);
    def.role = CovariateRole::EarningsLag;
    def.quarter = -k;
    data.covariate_spec.defs.push_back(def);
  }

  SimTruth truth;
  std::map<std::pair<int, int>, std::pair<double, double>> sums, csums;  // (sum, count)
  std::vector<double> counts(static_cast<std::size_t>(cfg.S), 0.0);
  const int width = static_cast<int>(std::to_string(cfg.n_workers).size());
  auto floor0 = [&](double v) { return cfg.truncate ? std::max(v, 0.0) : v; };

  data.workers.resize(cfg.n_workers);
  for (std::size_t i = 0; i < cfg.n_workers; ++i) {
    Worker& w = data.workers[i];
    char id[32];
    std::snprintf(id, sizeof id, "w%0*zu", width, i + 1);
    w.id = id;
    const int s = lp.enroll[i];
    if (s > 0) {
      w.enroll_quarter = s;
      counts[static_cast<std::size_t>(s - 1)] += 1.0;
      if (cfg.completers) w.completer = lp.completer[i] != 0;
    }
    for (int q = lp.first_quarter; q <= lp.last_quarter; ++q) {
      const double y0 = lp.at(i, q);
      double y = y0;
      if (s > 0 && q >= s) y += cfg.effect(q - s, lp.completer[i] != 0);
      if (cfg.truncate && y < 0) ++truth.truncated;
      w.earnings.set(q, floor0(y));
      if (s > 0 && q >= s) {
        const double d = floor0(y) - floor0(y0);
        auto& acc = sums[{s, q - s}];
        acc.first += d;
        acc.second += 1.0;
        if (cfg.completers && lp.completer[i]) {
          auto& c = csums[{s, q - s}];
          c.first += d;
          c.second += 1.0;
        }
      }
    }
  }
  for (const auto& [key, acc] : sums) truth.delta[key] = acc.first / acc.second;
  for (const auto& [key, acc] : csums) truth.completer_delta[key] = acc.first / acc.second;
  const double total = std::accumulate(counts.begin(), counts.end(), 0.0);
  for (double c : counts) truth.shares.push_back(total > 0 ? c / total : 0.0);
  for (int t = 1; t <= lp.last_quarter; ++t) {
    truth.beta[t] = cfg.rule == SelectionRule::AC
                        ? beta_ac(cfg.rho, cfg.sigma.omega, cfg.sigma.eps, cfg.sigma.upsilon, cfg.K, t)
                        : beta_hr(cfg.rho, cfg.sigma.omega, cfg.sigma.eps, cfg.sigma.upsilon, cfg.K, t);
  }
  return {std::move(data), std::move(truth)};
}

VectorXd projection_coefficients(double rho, const Sigmas& sigma, int K, int t, int z_quarter) {
  auto cov = [&](int a, int b) {
    return sigma.omega * sigma.omega + sigma.eps * sigma.eps * std::pow(rho, std::abs(a - b));
  };
  // Regressors: Z, then Y_{-K}, ..., Y_0.
  const Eigen::Index p = K + 2;
  std::vector<int> quarter(static_cast<std::size_t>(p));
  quarter[0] = z_quarter;
  for (int j = 0; j <= K; ++j) quarter[static_cast<std::size_t>(j + 1)] = j - K;
  MatrixXd A(p, p);
  VectorXd b(p);
  for (Eigen::Index r = 0; r < p; ++r) {
    for (Eigen::Index c = 0; c < p; ++c) A(r, c) = cov(quarter[static_cast<std::size_t>(r)], quarter[static_cast<std::size_t>(c)]);
    b(r) = cov(quarter[static_cast<std::size_t>(r)], t);
  }
  A(0, 0) += sigma.upsilon * sigma.upsilon;
  return A.fullPivLu().solve(b);
}

// --- Discrete populations ---------------------------------------------------------

std::size_t DiscretePopulation::size() const {
  std::size_t n = 0;
  for (const auto& r : rows) n += r.count;
  return n;
}

DiscretePopulation random_population(std::mt19937_64& rng, const PopulationOptions& opts) {
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  const std::vector<std::pair<int, int>> ratios = {{1, 3}, {1, 2}, {2, 3}, {1, 1}, {3, 2}, {2, 1}, {3, 1}, {1, 4}};

  for (;;) {
    DiscretePopulation pop;
    const int patterns = uniform(2, std::max(2, opts.max_patterns));
    std::vector<std::pair<int, int>> pick = ratios;
    std::shuffle(pick.begin(), pick.end(), rng);
    std::set<std::pair<std::size_t, std::size_t>> conditional_ratios;  // reduced N1 : Nnever
    bool distinct = true;
    for (int p = 0; p < patterns; ++p) {
      const double x = 1000.0 * (p + 2);
      const auto [a, b] = pick[static_cast<std::size_t>(p)];
      const int types = uniform(1, opts.max_types);
      // Later-enrollment counts fall (or rise) with interim earnings.
      std::vector<int> later(static_cast<std::size_t>(types)), never(static_cast<std::size_t>(types));
      for (auto& c : later) c = opts.later_enrollees ? uniform(1, 4) : 0;
      for (auto& e : never) e = uniform(1, 4);
      std::sort(later.begin(), later.end(), std::greater<>());
      std::sort(never.begin(), never.end());
      if (!opts.negative_selection) {
        std::reverse(later.begin(), later.end());
        std::reverse(never.begin(), never.end());
      }
      std::size_t n1 = 0, nnever = 0;
      double base = x / 2.0;
      for (int j = 0; j < types; ++j) {
        const auto ju = static_cast<std::size_t>(j);
        const int q = uniform(1, 3);
        const double y1 = x + 400.0 * j - 600.0;
        base += uniform(1, 5) * 150.0;
        const int outcomes = uniform(1, opts.max_outcomes);
        for (int l = 0; l < outcomes; ++l) {
          const int r = uniform(1, 3);
          const double v = base + 100.0 * l;
          const auto unit = static_cast<std::size_t>(q * r);
          const double gain1 = 50.0 * uniform(0, 20), gain2 = 50.0 * uniform(0, 20);
          const auto lc = static_cast<std::size_t>(later[ju]), ec = static_cast<std::size_t>(never[ju]);
          const auto au = static_cast<std::size_t>(a), bu = static_cast<std::size_t>(b);
          pop.rows.push_back({x, 1, y1 - 300.0, v + gain1, v, au * unit * (lc + ec)});
          if (lc) pop.rows.push_back({x, 2, y1, v + gain2, v, bu * unit * lc});
          pop.rows.push_back({x, 0, y1, v, v, bu * unit * ec});
          n1 += au * unit * (lc + ec);
          nnever += bu * unit * ec;
        }
      }
      const std::size_t g = std::gcd(n1, nnever);
      distinct = distinct && conditional_ratios.insert({n1 / g, nnever / g}).second;
    }
    if (distinct) return pop;
  }
}

PanelDataset population_panel(const DiscretePopulation& pop) {
  PanelDataset data;
  data.window_length = 2;
  CovariateDef def;
  def.name = "y_m0";
  def.role = CovariateRole::EarningsLag;
  def.quarter = 0;
  data.covariate_spec.defs.push_back(def);
  std::size_t id = 0;
  for (const auto& r : pop.rows) {
    for (std::size_t c = 0; c < r.count; ++c) {
      Worker w;
      w.id = "u" + std::to_string(++id);
      if (r.enroll > 0) w.enroll_quarter = r.enroll;
      w.earnings.set(0, r.x1);
      w.earnings.set(1, r.y1);
      w.earnings.set(2, r.yt);
      data.workers.push_back(std::move(w));
    }
  }
  return data;
}

namespace {

struct Acc {
  double n = 0.0, sum = 0.0;
  double mean() const { return sum / n; }
};

}  // namespace

double robins_oracle(const DiscretePopulation& pop) {
  std::map<double, double> treated;                        // x -> N(D_1 = 1)
  std::map<double, double> untreated;                      // x -> N(D_1 = 0)
  std::map<std::pair<double, double>, double> interim;     // (x, y1) -> N(D_1 = 0)
  std::map<std::pair<double, double>, Acc> never;          // (x, y1) -> outcomes of D = 0
  double n1 = 0.0;
  for (const auto& r : pop.rows) {
    const double c = static_cast<double>(r.count);
    if (r.enroll == 1) {
      treated[r.x1] += c;
      n1 += c;
      continue;
    }
    untreated[r.x1] += c;
    interim[{r.x1, r.y1}] += c;
    if (r.enroll == 0) {
      auto& a = never[{r.x1, r.y1}];
      a.n += c;
      a.sum += c * r.yt;
    }
  }
  if (n1 == 0) throw OverlapError("robins_oracle: no period-1 enrollees");
  double result = 0.0;
  for (const auto& [x, nt] : treated) {
    auto u = untreated.find(x);
    if (u == untreated.end()) throw OverlapError("robins_oracle: no period-1 non-enrollees at x1 = " + std::to_string(x));
    double inner = 0.0;
    for (auto it = interim.lower_bound({x, -INFINITY}); it != interim.end() && it->first.first == x; ++it) {
      auto nv = never.find(it->first);
      if (nv == never.end()) throw OverlapError("robins_oracle: no never-enrollees in an interim cell");
      inner += it->second / u->second * nv->second.mean();
    }
    result += nt / n1 * inner;
  }
  return result;
}

double true_counterfactual(const DiscretePopulation& pop) {
  Acc a;
  for (const auto& r : pop.rows)
    if (r.enroll == 1) {
      a.n += static_cast<double>(r.count);
      a.sum += static_cast<double>(r.count) * r.y00;
    }
  return a.mean();
}

PopulationTot enumerate_tot(const DiscretePopulation& pop, int s) {
  if (s != 1 && s != 2) throw DomainError("enumerate_tot: cohort must be 1 or 2");
  PopulationTot out;
  Acc treated, truth;
  for (const auto& r : pop.rows)
    if (r.enroll == s) {
      const double c = static_cast<double>(r.count);
      treated.n += c;
      treated.sum += c * r.yt;
      truth.n += c;
      truth.sum += c * r.y00;
    }
  if (treated.n == 0) throw OverlapError("enumerate_tot: cohort has no enrollees");
  out.treated_mean = treated.mean();
  out.truth = out.treated_mean - truth.mean();

  if (s == 2) {
    std::map<std::pair<double, double>, Acc> never;
    for (const auto& r : pop.rows)
      if (r.enroll == 0) {
        auto& a = never[{r.x1, r.y1}];
        a.n += static_cast<double>(r.count);
        a.sum += static_cast<double>(r.count) * r.yt;
      }
    double cf = 0.0;
    for (const auto& r : pop.rows) {
      if (r.enroll != 2) continue;
      auto it = never.find({r.x1, r.y1});
      if (it == never.end()) throw OverlapError("enumerate_tot: no never-enrollees for a cohort-2 pattern");
      cf += static_cast<double>(r.count) / treated.n * it->second.mean();
    }
    out.lower = out.upper = out.lechner = out.ipw = out.treated_mean - cf;
    return out;
  }

  std::map<double, double> n_treated, n_untreated, n_never_x;
  std::map<double, Acc> never_x;
  std::map<std::pair<double, double>, double> n0, nlater;
  for (const auto& r : pop.rows) {
    const double c = static_cast<double>(r.count);
    if (r.enroll == 1) {
      n_treated[r.x1] += c;
      continue;
    }
    n_untreated[r.x1] += c;
    n0[{r.x1, r.y1}] += c;
    if (r.enroll == 2) nlater[{r.x1, r.y1}] += c;
    else {
      auto& a = never_x[r.x1];
      a.n += c;
      a.sum += c * r.yt;
    }
  }
  double lower_cf = 0.0, upper_cf = 0.0;
  for (const auto& [x, nt] : n_treated) {
    auto nv = never_x.find(x);
    if (nv == never_x.end()) throw OverlapError("enumerate_tot: no never-enrollees at a baseline pattern");
    const double w = nt / treated.n;
    lower_cf += w * nv->second.mean();
    upper_cf += w * nv->second.mean() * (nv->second.n / n_untreated.at(x));
  }
  out.lower = out.treated_mean - lower_cf;
  out.upper = out.treated_mean - upper_cf;
  out.lechner = out.treated_mean - robins_oracle(pop);

  double ipw = 0.0;
  for (const auto& r : pop.rows) {
    if (r.enroll != 0) continue;
    const double p1 = n_treated[r.x1] / (n_treated[r.x1] + n_untreated.at(r.x1));
    const auto key = std::make_pair(r.x1, r.y1);
    const double p2 = (nlater.count(key) ? nlater.at(key) : 0.0) / n0.at(key);
    ipw += static_cast<double>(r.count) * p1 / ((1.0 - p1) * (1.0 - p2)) * r.yt;
  }
  out.ipw = out.treated_mean - ipw / treated.n;
  return out;
}

}  // namespace dynmatch
