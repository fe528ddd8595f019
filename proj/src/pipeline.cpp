#include "dynmatch/pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <openssl/evp.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "dynmatch/costbenefit.hpp"
#include "dynmatch/text.hpp"
#include "dynmatch/validation.hpp"

namespace dynmatch {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

const char* to_string(Command command) {
  switch (command) {
    case Command::Estimate: return "estimate";
    case Command::Simulate: return "simulate";
    case Command::Diagnose: return "diagnose";
    case Command::Costbenefit: return "costbenefit";
    case Command::Validate: return "validate";
  }
  return "?";
}

std::optional<Command> parse_command(std::string_view name) {
  for (Command c : {Command::Estimate, Command::Simulate, Command::Diagnose, Command::Costbenefit, Command::Validate})
    if (name == to_string(c)) return c;
  return std::nullopt;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

// --- Configuration --------------------------------------------------------------

namespace {

std::string join(const std::vector<std::string>& v, const char* sep = ",") {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

std::string join(const std::vector<double>& v) {
  std::vector<std::string> s;
  for (double x : v) s.push_back(text::format_double(x));
  return join(s);
}

std::vector<std::string> list(const std::string& s) {
  std::vector<std::string> out;
  for (const auto& part : text::split(s, ',')) {
    const auto t = text::trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<double> number_list(const std::string& s, const std::string& key) {
  std::vector<double> out;
  for (const auto& part : list(s)) {
    auto v = text::parse_double(part);
    if (!v) throw SchemaError("config: bad number '" + part + "' in " + key);
    out.push_back(*v);
  }
  return out;
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "yes" || s == "1" || s == "on") return true;
  if (s == "false" || s == "no" || s == "0" || s == "off") return false;
  throw SchemaError("config: '" + s + "' is not a boolean in " + key);
}

template <typename T>
T parse_number(const std::string& s, const std::string& key) {
  if constexpr (std::is_integral_v<T>) {
    auto v = text::parse_int(s);
    if (!v) throw SchemaError("config: '" + s + "' is not an integer in " + key);
    return static_cast<T>(*v);
  } else {
    auto v = text::parse_double(s);
    if (!v) throw SchemaError("config: '" + s + "' is not a number in " + key);
    return static_cast<T>(*v);
  }
}

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || base_dir.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

const char* to_string(SelectionRule rule) { return rule == SelectionRule::AC ? "ac" : "hr"; }

}  // namespace

void apply_config(RunConfig& c, std::istream& in, const std::string& base_dir) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw SchemaError(std::string("config: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw SchemaError("config: key '" + section + "' outside a section");
    for (const auto& [key, node] : body) {
      const std::string v = node.get_value<std::string>();
      const std::string name = section + "." + key;
      auto integer = [&] { return parse_number<int>(v, name); };
      auto real = [&] { return parse_number<double>(v, name); };
      auto flag = [&] { return parse_bool(v, name); };
      bool known = true;
      if (section == "run") {
        if (key == "seed") c.seed = parse_number<std::uint64_t>(v, name);
        else known = false;
      } else if (section == "output") {
        if (key == "dir") c.out = resolve(v, base_dir);
        else known = false;
      } else if (section == "panel") {
        if (key == "input") c.input = resolve(v, base_dir);
        else if (key == "input_static") c.input_static = resolve(v, base_dir);
        else if (key == "input_long") c.input_long = resolve(v, base_dir);
        else if (key == "covariates") c.covariates = v;
        else if (key == "window") c.window = integer();
        else if (key == "exact_keys") c.exact_keys = list(v);
        else known = false;
      } else if (section == "estimate") {
        if (key == "neighbors") c.neighbors = integer();
        else if (key == "ties") {
          if (v != "lowest" && v != "all") throw SchemaError("config: estimate.ties must be lowest or all");
          c.all_ties = v == "all";
        } else if (key == "trim") c.trim = real();
        else if (key == "estimands") c.estimands = list(v);
        else if (key == "tau_min") c.tau_min = integer();
        else if (key == "tau_max") c.tau_max = integer();
        else if (key == "bootstrap") c.bootstrap = integer();
        else if (key == "hajek") c.hajek = flag();
        else if (key == "subgroup") c.subgroup = v;
        else if (key == "refit_subgroup") c.refit_subgroup = flag();
        else known = false;
      } else if (section == "diagnostics") {
        if (key == "overlap_bins") c.overlap_bins = integer();
        else if (key == "interim") c.interim = flag();
        else known = false;
      } else if (section == "simulate") {
        auto& s = c.sim;
        if (key == "n_workers") s.n_workers = parse_number<std::size_t>(v, name);
        else if (key == "S") s.S = integer();
        else if (key == "K") s.K = integer();
        else if (key == "rho") s.rho = real();
        else if (key == "sigma_omega") s.sigma.omega = real();
        else if (key == "sigma_eps") s.sigma.eps = real();
        else if (key == "sigma_upsilon") s.sigma.upsilon = real();
        else if (key == "lambda") s.lambda = real();
        else if (key == "rule") {
          if (v != "ac" && v != "hr") throw SchemaError("config: simulate.rule must be ac or hr");
          s.rule = v == "ac" ? SelectionRule::AC : SelectionRule::HR;
        } else if (key == "k") s.k = integer();
        else if (key == "ybar") s.ybar = number_list(v, name);
        else if (key == "hr_alpha") s.hr_alpha = real();
        else if (key == "hr_r") s.hr_r = real();
        else if (key == "d1_lag") s.d1_lag = integer();
        else if (key == "d1_ybar") s.d1_ybar = real();
        else if (key == "alpha") s.alpha = real();
        else if (key == "lock_in") s.lock_in = number_list(v, name);
        else if (key == "horizon") s.horizon = integer();
        else if (key == "truncate") s.truncate = flag();
        else if (key == "completers") s.completers = flag();
        else if (key == "completer_cut") s.completer_cut = real();
        else if (key == "completer_noise") s.completer_noise = real();
        else if (key == "completer_alpha") s.completer_alpha = real();
        else if (key == "noncompleter_alpha") s.noncompleter_alpha = real();
        else known = false;
      } else if (section == "costbenefit") {
        if (key == "scenario") c.scenario = resolve(v, base_dir);
        else known = false;
      } else if (section == "validate") {
        if (key == "reps") c.validate_reps = integer();
        else known = false;
      } else {
        throw SchemaError("config: unknown section [" + section + "]");
      }
      if (!known) throw SchemaError("config: unknown key '" + key + "' in [" + section + "]");
    }
  }
}

void apply_config_file(RunConfig& config, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("config file not found: " + path);
  apply_config(config, in, fs::path(path).parent_path().string());
}

std::string RunConfig::canonical() const {
  std::map<std::string, std::string> kv;
  kv["command"] = to_string(command);
  kv["run.seed"] = seed ? std::to_string(*seed) : "";
  kv["panel.input"] = input;
  kv["panel.input_static"] = input_static;
  kv["panel.input_long"] = input_long;
  kv["panel.covariates"] = covariates;
  kv["panel.window"] = std::to_string(window);
  kv["panel.exact_keys"] = exact_keys ? join(*exact_keys) : "<spec>";
  kv["estimate.neighbors"] = std::to_string(neighbors);
  kv["estimate.ties"] = all_ties ? "all" : "lowest";
  kv["estimate.trim"] = text::format_double(trim);
  kv["estimate.estimands"] = join(estimands);
  kv["estimate.tau_min"] = std::to_string(tau_min);
  kv["estimate.tau_max"] = std::to_string(tau_max);
  kv["estimate.bootstrap"] = std::to_string(bootstrap);
  kv["estimate.hajek"] = hajek ? "true" : "false";
  kv["estimate.subgroup"] = subgroup;
  kv["estimate.refit_subgroup"] = refit_subgroup ? "true" : "false";
  kv["diagnostics.overlap_bins"] = std::to_string(overlap_bins);
  kv["diagnostics.interim"] = interim ? "true" : "false";
  kv["simulate.n_workers"] = std::to_string(sim.n_workers);
  kv["simulate.S"] = std::to_string(sim.S);
  kv["simulate.K"] = std::to_string(sim.K);
  kv["simulate.rho"] = text::format_double(sim.rho);
  kv["simulate.sigma_omega"] = text::format_double(sim.sigma.omega);
  kv["simulate.sigma_eps"] = text::format_double(sim.sigma.eps);
  kv["simulate.sigma_upsilon"] = text::format_double(sim.sigma.upsilon);
  kv["simulate.lambda"] = text::format_double(sim.lambda);
  kv["simulate.rule"] = to_string(sim.rule);
  kv["simulate.k"] = std::to_string(sim.k);
  kv["simulate.ybar"] = join(sim.ybar);
  kv["simulate.hr_alpha"] = text::format_double(sim.hr_alpha);
  kv["simulate.hr_r"] = text::format_double(sim.hr_r);
  kv["simulate.d1_lag"] = std::to_string(sim.d1_lag);
  kv["simulate.d1_ybar"] = text::format_double(sim.d1_ybar);
  kv["simulate.alpha"] = text::format_double(sim.alpha);
  kv["simulate.lock_in"] = join(sim.lock_in);
  kv["simulate.horizon"] = std::to_string(sim.horizon);
  kv["simulate.truncate"] = sim.truncate ? "true" : "false";
  kv["simulate.completers"] = sim.completers ? "true" : "false";
  kv["simulate.completer_cut"] = text::format_double(sim.completer_cut);
  kv["simulate.completer_noise"] = text::format_double(sim.completer_noise);
  kv["simulate.completer_alpha"] = text::format_double(sim.completer_alpha);
  kv["simulate.noncompleter_alpha"] = text::format_double(sim.noncompleter_alpha);
  kv["costbenefit.scenario"] = scenario;
  kv["validate.reps"] = std::to_string(validate_reps);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void RunConfig::validate() const {
  auto need_file = [](const std::string& path, const char* what) {
    if (path.empty()) throw DomainError(std::string("no ") + what + " given");
    if (!fs::exists(path)) throw InputError(std::string(what) + " not found: " + path);
  };
  switch (command) {
    case Command::Estimate:
    case Command::Diagnose:
      if (input.empty() && input_static.empty()) throw DomainError("no input panel given (--input or [panel] input)");
      if (!input.empty()) {
        need_file(input, "input file");
      } else {
        need_file(input_static, "static input file");
        need_file(input_long, "long input file");
      }
      if (window < 1) throw DomainError("window S must be at least 1");
      if (neighbors < 1) throw DomainError("neighbors must be at least 1");
      if (!(trim > 0 && trim <= 1)) throw DomainError("trim threshold must lie in (0, 1]");
      if (tau_min > tau_max) throw DomainError("tau-min exceeds tau-max");
      if (bootstrap < 0 || bootstrap == 1) throw DomainError("bootstrap must be 0 or at least 2");
      if (bootstrap > 0 && !seed) throw DomainError("--seed is required with --bootstrap");
      if (overlap_bins < 1) throw DomainError("overlap_bins must be positive");
      for (const auto& e : estimands)
        if (!parse_estimand(e)) throw DomainError("unknown estimand '" + e + "'");
      if (!subgroup.empty()) SubgroupFilter::parse(subgroup);
      break;
    case Command::Simulate:
      if (!seed) throw DomainError("--seed is required for simulate");
      sim.validate();
      break;
    case Command::Costbenefit:
      need_file(scenario, "scenario file");
      break;
    case Command::Validate:
      if (!seed) throw DomainError("--seed is required for validate");
      if (validate_reps < 2) throw DomainError("validate reps must be at least 2");
      break;
  }
}

std::string estimate_config_for(const RunConfig& c, const std::string& panel_file) {
  std::ostringstream out;
  out << "[run]\nseed = " << (c.seed ? *c.seed : 1) << "\n\n";
  out << "[panel]\ninput = " << panel_file << "\n";
  out << "covariates = " << c.covariates << "\n";
  out << "window = " << c.sim.S << "\n\n";
  out << "[estimate]\nestimands = " << join(c.estimands) << "\n";
  out << "tau_min = " << c.tau_min << "\n";
  out << "tau_max = " << std::min(c.tau_max, c.sim.horizon) << "\n";
  return out.str();
}

// --- Subgroups -----------------------------------------------------------------

SubgroupFilter SubgroupFilter::parse(std::string_view expr) {
  SubgroupFilter f;
  f.text_ = std::string(text::trim(expr));
  std::string_view rest = f.text_;
  while (true) {
    const auto amp = rest.find("&&");
    const std::string_view part = text::trim(rest.substr(0, amp));
    if (part.empty()) throw DomainError("subgroup: empty term in '" + f.text_ + "'");
    std::size_t at = std::string_view::npos, len = 0;
    for (const char* op : {"==", "!=", "<=", ">=", "<", ">"}) {
      const auto p = part.find(op);
      if (p != std::string_view::npos && (at == std::string_view::npos || p < at)) {
        at = p;
        len = std::char_traits<char>::length(op);
      }
    }
    if (at == std::string_view::npos) throw DomainError("subgroup: no comparison in '" + std::string(part) + "'");
    Term t{std::string(text::trim(part.substr(0, at))), std::string(part.substr(at, len)),
           std::string(text::trim(part.substr(at + len)))};
    if (t.value.size() >= 2 && (t.value.front() == '"' || t.value.front() == '\'') && t.value.back() == t.value.front())
      t.value = t.value.substr(1, t.value.size() - 2);
    if (t.name.empty() || t.value.empty()) throw DomainError("subgroup: incomplete term '" + std::string(part) + "'");
    f.terms_.push_back(std::move(t));
    if (amp == std::string_view::npos) break;
    rest = rest.substr(amp + 2);
  }
  return f;
}

namespace {

bool compare(double a, const std::string& op, double b) {
  if (op == "==") return a == b;
  if (op == "!=") return a != b;
  if (op == "<") return a < b;
  if (op == "<=") return a <= b;
  if (op == ">") return a > b;
  return a >= b;
}

// Relative quarter of an earnings column name y_m<k> / y_p<t>.
std::optional<int> earnings_quarter(const std::string& name) {
  if (name.size() < 4 || name.compare(0, 2, "y_") != 0 || (name[2] != 'm' && name[2] != 'p')) return std::nullopt;
  auto k = text::parse_int(std::string_view(name).substr(3));
  if (!k || *k < 0) return std::nullopt;
  return static_cast<int>(name[2] == 'm' ? -*k : *k);
}

double numeric_value(const std::string& v, const std::string& name) {
  auto d = text::parse_double(v);
  if (!d) throw DomainError("subgroup: '" + v + "' is not a number for " + name);
  return *d;
}

}  // namespace

bool SubgroupFilter::matches(const Worker& w) const {
  for (const auto& t : terms_) {
    bool ok;
    if (t.name == "layoff_q") {
      ok = compare(w.layoff_quarter, t.op, numeric_value(t.value, t.name));
    } else if (t.name == "enroll_q") {
      ok = compare(w.enroll_quarter.value_or(0), t.op, numeric_value(t.value, t.name));
    } else if (t.name == "completer") {
      if (!w.completer) return false;
      ok = compare(*w.completer ? 1.0 : 0.0, t.op, numeric_value(t.value, t.name));
    } else if (auto q = earnings_quarter(t.name)) {
      const auto y = w.earnings.at(*q);
      if (!y) return false;
      ok = compare(*y, t.op, numeric_value(t.value, t.name));
    } else {
      auto it = w.covariates.find(t.name);
      if (it == w.covariates.end()) throw DomainError("subgroup: unknown covariate '" + t.name + "'");
      if (const auto* s = std::get_if<std::string>(&it->second)) {
        if (t.op != "==" && t.op != "!=") throw DomainError("subgroup: '" + t.name + "' is categorical; use == or !=");
        ok = (*s == t.value) == (t.op == "==");
      } else {
        ok = compare(std::get<double>(it->second), t.op, numeric_value(t.value, t.name));
      }
    }
    if (!ok) return false;
  }
  return true;
}

IndexList select(const PanelDataset& data, const SubgroupFilter& filter) {
  IndexList out;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (filter.matches(data.workers[i])) out.push_back(i);
  return out;
}

// --- Estimation ------------------------------------------------------------------

PanelDataset load_input(const RunConfig& c) {
  const auto spec = CovariateSpec::parse(c.covariates);
  if (!c.input.empty()) {
    if (!fs::exists(c.input)) throw InputError("input file not found: " + c.input);
    return load_panel(c.input, spec, c.window);
  }
  for (const auto* p : {&c.input_static, &c.input_long})
    if (!fs::exists(*p)) throw InputError("input file not found: " + *p);
  return load_panel_long(c.input_static, c.input_long, spec, c.window);
}

namespace {

std::string cohort_label(int s) { return "cohort " + std::to_string(s); }

// Rethrows module errors with the pipeline stage and cohort in front.
template <typename F>
auto in_stage(const char* stage, int s, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const InputError&) {
    throw;
  } catch (const Error& e) {
    std::string where = std::string(stage) + (s > 0 ? ", " + cohort_label(s) : std::string());
    throw Error(where + ": " + e.what());
  }
}

struct QuarterRange {
  int first = 0;
  int last = 0;
};

QuarterRange observed_quarters(const PanelDataset& data) {
  QuarterRange r{std::numeric_limits<int>::max(), std::numeric_limits<int>::min()};
  for (const auto& w : data.workers) {
    if (w.earnings.empty()) continue;
    r.first = std::min(r.first, w.earnings.first_quarter());
    r.last = std::max(r.last, w.earnings.last_quarter());
  }
  return r;
}

std::vector<double> outcome_vector(const PanelDataset& data, int t) {
  const VectorXd y = outcome_at(data, t);
  return {y.data(), y.data() + y.size()};
}

struct EstimandSet {
  std::set<EstimandKind> kinds;
  bool has(EstimandKind k) const { return kinds.count(k) > 0; }
};

EstimandSet estimand_set(const std::vector<std::string>& names) {
  EstimandSet set;
  for (const auto& n : names) {
    auto k = parse_estimand(n);
    if (!k) throw DomainError("unknown estimand '" + n + "'");
    if (*k == EstimandKind::CompleterLower || *k == EstimandKind::CompleterUpper) {
      set.kinds.insert(EstimandKind::CompleterLower);
      set.kinds.insert(EstimandKind::CompleterUpper);
    } else {
      set.kinds.insert(*k);
    }
  }
  return set;
}

std::string fits_json(const ScoreBook& book, const std::string& scores_from, std::size_t n) {
  ojson j;
  j["n_workers"] = n;
  j["scores_from"] = scores_from;
  j["fits"] = ojson::array();
  for (const auto& f : book.fits) {
    auto d = ojson::parse(f.diagnostics_json());
    d["score_kind"] = to_string(f.score_kind);
    d["separated"] = f.separated;
    ojson coef;
    coef["intercept"] = f.intercept;
    for (std::size_t i = 0; i < f.columns.size(); ++i) coef[f.columns[i]] = f.coefficients(static_cast<Eigen::Index>(i));
    d["coefficients"] = coef;
    j["fits"].push_back(d);
  }
  j["trims"] = ojson::array();
  for (const auto& t : book.trims) {
    ojson r;
    r["cohort"] = t.cohort;
    r["cell_id"] = t.cell_id;
    r["threshold"] = t.threshold_used;
    r["kept"] = t.kept.size();
    r["dropped_perfect_prediction"] = t.dropped_for_perfect_prediction.size();
    r["dropped_high_score"] = t.dropped_for_high_score.size();
    j["trims"].push_back(r);
  }
  j["warnings"] = book.warnings;
  return j.dump(2) + "\n";
}

std::vector<double> open_unit_scores(const std::vector<double>& scores, const IndexList& units) {
  std::vector<double> out;
  for (auto w : units) {
    const double p = scores[w];
    if (p > 0 && p < 1) out.push_back(p);
  }
  return out;
}

bool estimate_order(const CohortEstimate& a, const CohortEstimate& b) {
  return std::tuple(static_cast<int>(a.kind), a.cohort, a.quarter) <
         std::tuple(static_cast<int>(b.kind), b.cohort, b.quarter);
}

}  // namespace

EstimateRun run_estimation(const PanelDataset& full, const RunConfig& c, bool with_estimates) {
  EstimateRun run;
  const auto keys = c.exact_keys ? *c.exact_keys : full.covariate_spec.exact_keys();
  ScoreBookOptions score_opts;
  score_opts.trim_threshold = c.trim;

  PanelDataset subset;
  const PanelDataset* data = &full;
  ExactCells cells;
  ScoreBook book;
  std::string scores_from = "sample";
  if (c.subgroup.empty()) {
    cells = in_stage("cells", 0, [&] { return partition_cells(full, keys); });
    book = in_stage("propensity", 0, [&] { return fit_score_book(full, cells, score_opts); });
  } else {
    const auto filter = SubgroupFilter::parse(c.subgroup);
    const IndexList draw = select(full, filter);
    if (draw.empty()) throw EmptyCohortError("subgroup '" + c.subgroup + "' selects no workers");
    subset = resample(full, draw);
    data = &subset;
    if (c.refit_subgroup) {
      cells = in_stage("cells", 0, [&] { return partition_cells(subset, keys); });
      book = in_stage("propensity", 0, [&] { return fit_score_book(subset, cells, score_opts); });
      scores_from = "subgroup refit";
    } else {
      // Scores estimated on the full sample; matching is redone inside the subgroup.
      const auto full_cells = in_stage("cells", 0, [&] { return partition_cells(full, keys); });
      const auto full_book = in_stage("propensity", 0, [&] { return fit_score_book(full, full_cells, score_opts); });
      book = resample(full_book, draw);
      book.fits = full_book.fits;
      book.trims = full_book.trims;
      book.warnings = full_book.warnings;
      cells = in_stage("cells", 0, [&] { return partition_cells(subset, keys); });
      scores_from = "full sample";
    }
  }
  run.n_workers = data->size();
  run.fits_json = fits_json(book, scores_from, data->size());
  for (const auto& w : book.warnings) run.warnings.push_back("propensity: " + w);

  const int S = data->window_length;
  const EstimandSet wanted = estimand_set(c.estimands);
  const QuarterRange range = observed_quarters(*data);
  EstimatorOptions est_opts{c.neighbors, c.all_ties ? TieMode::All : TieMode::LowestIndex, c.hajek};
  EstimationContext ctx{*data, cells, book, est_opts};
  std::map<int, std::vector<double>> outcome_cache;
  auto outcome = [&](int t) -> const std::vector<double>& {
    auto it = outcome_cache.find(t);
    if (it == outcome_cache.end()) it = outcome_cache.emplace(t, outcome_vector(*data, t)).first;
    return it->second;
  };
  auto warn = [&](int s, const std::string& msg) { run.warnings.push_back(cohort_label(s) + ": " + msg); };

  std::vector<InterimDifferential> interim_parts;
  std::vector<std::pair<int, int>> cohort_quarters;  // (s, t) pairs with lechner or ipw estimates
  for (int s = 1; s <= S; ++s) {
    if (data->enrollees(s).empty()) {
      warn(s, "no enrollees; skipped");
      continue;
    }
    if (book.kept[static_cast<std::size_t>(s - 1)].empty()) {
      warn(s, "no enrollees left after trimming; skipped");
      continue;
    }
    const auto lower = in_stage("matching", s, [&] { return match_cohort(ctx, s, ComparisonPool::Never); });
    for (const auto& w : lower.warnings) warn(s, w);
    run.balance.push_back(in_stage("diagnostics", s, [&] { return balance_raw(*data, s); }));
    if (!lower.matches.pairs.empty())
      run.balance.push_back(in_stage("diagnostics", s, [&] { return balance_matched(*data, lower.matches); }));

    const auto& pc = book.scores(ScoreKind::Conditional, s);
    const auto ts = open_unit_scores(pc, data->enrollees(s)), cs = open_unit_scores(pc, data->never_enrollees());
    if (!ts.empty() && !cs.empty())
      run.overlap.emplace_back(s, in_stage("diagnostics", s, [&] { return overlap_report(ts, cs, c.overlap_bins, c.trim); }));
    else
      warn(s, "overlap report skipped (no interior scores in one group)");

    if (c.interim)
      for (int l = 1; s + l <= S; ++l)
        if (auto r = in_stage("diagnostics", s, [&] { return assumption2_test(ctx, s, l); }))
          interim_parts.insert(interim_parts.end(), r->begin(), r->end());

    if (!with_estimates) continue;
    if (lower.matches.pairs.empty()) {
      warn(s, "no matched pairs; estimands skipped");
      continue;
    }

    std::optional<CohortMatch> at_risk;
    if (wanted.has(EstimandKind::NowVsLater)) {
      at_risk = in_stage("matching", s, [&] { return match_cohort(ctx, s, ComparisonPool::AtRisk); });
      for (const auto& w : at_risk->warnings) warn(s, "now-vs-later: " + w);
    }
    std::optional<UpperBoundPlan> upper;
    if (wanted.has(EstimandKind::UpperBound)) {
      upper = in_stage("estimators", s, [&] { return plan_upper_bound(ctx, s); });
      for (const auto& w : upper->warnings) warn(s, "upper bound: " + w);
    }
    std::optional<LechnerPlan> lechner;
    if (wanted.has(EstimandKind::LechnerPoint)) {
      lechner = in_stage("estimators", s, [&] { return plan_lechner(ctx, s); });
      for (const auto& w : lechner->warnings) warn(s, "lechner: " + w);
    }
    std::optional<CompleterPlan> completer;
    if (wanted.has(EstimandKind::CompleterLower)) {
      completer = in_stage("estimators", s, [&] { return plan_completer(ctx, s); });
      if (!completer) warn(s, "no completers; completer bounds skipped");
      else
        for (const auto& w : completer->warnings) warn(s, "completer: " + w);
    }

    bool truncated = false, did_warned = false;
    for (int tau = c.tau_min; tau <= c.tau_max; ++tau) {
      const int t = s + tau;
      if (t < range.first || t > range.last) {
        truncated = true;
        continue;
      }
      const auto& y = outcome(t);
      auto record = [&](const char* what, auto&& make) {
        try {
          auto e = make();
          for (const auto& w : e.warnings) warn(s, std::string(what) + ": " + w);
          e.warnings.clear();
          run.cohorts.push_back(std::move(e));
        } catch (const DomainError& e) {
          warn(s, std::string(what) + " at tau " + std::to_string(tau) + " skipped: " + e.what());
        } catch (const EmptyCohortError& e) {
          warn(s, std::string(what) + " at tau " + std::to_string(tau) + " skipped: " + e.what());
        }
      };
      if (wanted.has(EstimandKind::LowerBound))
        record("lower bound",
               [&] { return evaluate_matches(lower.matches, y, y, EstimandKind::LowerBound, s, t); });
      if (at_risk)
        record("now-vs-later",
               [&] { return evaluate_matches(at_risk->matches, y, y, EstimandKind::NowVsLater, s, t); });
      if (upper) record("upper bound", [&] { return evaluate_upper_bound(*upper, y, t); });
      if (lechner) {
        record("lechner", [&] { return evaluate_lechner(*lechner, y, t); });
        cohort_quarters.emplace_back(s, t);
      }
      if (wanted.has(EstimandKind::Ipw)) {
        record("ipw", [&] { return ipw_effect(ctx, s, t); });
        if (!lechner) cohort_quarters.emplace_back(s, t);
      }
      if (completer) {
        try {
          auto [lo, hi] = evaluate_completer(*completer, y, t);
          run.cohorts.push_back(std::move(lo));
          run.cohorts.push_back(std::move(hi));
        } catch (const DomainError& e) {
          warn(s, "completer bounds at tau " + std::to_string(tau) + " skipped: " + e.what());
        }
      }
      if (wanted.has(EstimandKind::Did)) {
        const int t_pre = s - 1 - tau;
        if (t_pre < range.first) {
          if (!did_warned) warn(s, "DiD baseline quarter " + std::to_string(t_pre) + " precedes the data; skipped");
          did_warned = true;
        } else {
          record("did", [&] { return did_estimate(lower.matches, *data, t, t_pre); });
        }
      }
    }
    if (truncated) warn(s, "event times outside observed quarters " + std::to_string(range.first) + ".." +
                               std::to_string(range.last) + " skipped");
  }

  if (c.interim && !interim_parts.empty()) {
    auto agg = aggregate_interim(interim_parts);
    attach_p_values(interim_parts);
    attach_p_values(agg);
    run.interim = interim_parts;
    run.interim.insert(run.interim.end(), agg.begin(), agg.end());
  }

  // Completer decomposition over all enrollees, when every enrollee has a flag.
  IndexList enrollees;
  bool flags = true;
  for (std::size_t i = 0; i < data->size(); ++i)
    if (data->workers[i].enrolled()) {
      enrollees.push_back(i);
      flags = flags && data->workers[i].completer.has_value();
    }
  if (flags && !enrollees.empty())
    for (int tau = c.tau_min; tau <= c.tau_max; ++tau) {
      try {
        auto part = completer_decomposition(*data, enrollees, tau, tau);
        run.completer_decomposition.insert(run.completer_decomposition.end(), part.begin(), part.end());
      } catch (const DomainError&) {
        break;
      }
    }

  if (!with_estimates) return run;

  // Bootstrap variances for the estimands without an analytic one.
  if (c.bootstrap > 0 && !cohort_quarters.empty()) {
    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < run.cohorts.size(); ++i) {
      const auto k = run.cohorts[i].kind;
      if ((k == EstimandKind::LechnerPoint || k == EstimandKind::Ipw) && !is_missing(run.cohorts[i].value))
        targets.push_back(i);
    }
    auto stat = [&](const IndexList& draw) -> std::optional<std::vector<double>> {
      const PanelDataset d = resample(*data, draw);
      const ScoreBook b = resample(book, draw);
      const ExactCells cl = partition_cells(d, keys);
      EstimationContext bctx{d, cl, b, est_opts};
      std::map<int, LechnerPlan> plans;
      std::map<int, std::vector<double>> ys;
      std::vector<double> out;
      for (auto i : targets) {
        const auto& e = run.cohorts[i];
        auto yit = ys.find(e.quarter);
        if (yit == ys.end()) yit = ys.emplace(e.quarter, outcome_vector(d, e.quarter)).first;
        if (e.kind == EstimandKind::LechnerPoint) {
          auto pit = plans.find(e.cohort);
          if (pit == plans.end()) pit = plans.emplace(e.cohort, plan_lechner(bctx, e.cohort)).first;
          out.push_back(evaluate_lechner(pit->second, yit->second, e.quarter).value);
        } else {
          out.push_back(ipw_effect(bctx, e.cohort, e.quarter).value);
        }
      }
      return out;
    };
    const auto boot = in_stage("bootstrap", 0, [&] { return bootstrap(data->size(), c.bootstrap, *c.seed, stat); });
    if (boot.failed > 0)
      run.warnings.push_back("bootstrap: " + std::to_string(boot.failed) + " of " + std::to_string(c.bootstrap) +
                             " replicates failed");
    if (!boot.variance.empty())
      for (std::size_t j = 0; j < targets.size(); ++j) run.cohorts[targets[j]].variance = boot.variance[j];
  }

  std::sort(run.cohorts.begin(), run.cohorts.end(), estimate_order);
  std::map<std::pair<int, int>, std::vector<CohortEstimate>> groups;
  for (const auto& e : run.cohorts)
    if (!is_missing(e.value)) groups[{static_cast<int>(e.kind), e.tau()}].push_back(e);
  for (const auto& [key, comps] : groups) {
    const auto shares = enrollment_shares(comps);
    run.aggregates.push_back(aggregate(comps, shares));
  }
  return run;
}

// --- Commands ----------------------------------------------------------------------

namespace {

class ArtifactWriter {
 public:
  explicit ArtifactWriter(std::string dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  void write(const std::string& name, const std::string& bytes) {
    std::ofstream out(fs::path(dir_) / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (fs::path(dir_) / name).string());
    out << bytes;
    files_[name] = {sha256_hex(bytes), bytes.size()};
  }

  void manifest(const RunConfig& c) {
    ojson j;
    j["tool"] = "dynmatch";
    j["version"] = kVersion;
    j["command"] = to_string(c.command);
    j["config_sha256"] = sha256_hex(c.canonical());
    j["seed"] = c.seed ? ojson(*c.seed) : ojson();
    j["files"] = ojson::array();
    for (const auto& [name, info] : files_) j["files"].push_back({{"path", name}, {"sha256", info.first}, {"bytes", info.second}});
    std::ofstream out(fs::path(dir_) / "manifest.json", std::ios::binary);
    out << j.dump(2) << "\n";
  }

 private:
  std::string dir_;
  std::map<std::string, std::pair<std::string, std::size_t>> files_;
};

template <typename F>
std::string render(F&& f) {
  std::ostringstream out;
  f(out);
  return out.str();
}

void write_diagnostics(ArtifactWriter& w, const EstimateRun& run) {
  w.write("fits.json", run.fits_json);
  w.write("balance.csv", render([&](std::ostream& o) { write_balance(o, run.balance); }));
  w.write("overlap.csv", render([&](std::ostream& o) {
            if (run.overlap.empty())
              text::write_csv_record(o, {"cohort", "bin", "lo", "hi", "treated_count", "control_count",
                                         "treated_density", "control_density"});
            for (std::size_t i = 0; i < run.overlap.size(); ++i)
              write_overlap(o, run.overlap[i].second, run.overlap[i].first, i == 0);
          }));
  w.write("interim.csv", render([&](std::ostream& o) { write_interim(o, run.interim); }));
  if (!run.completer_decomposition.empty())
    w.write("completer_decomposition.csv", render([&](std::ostream& o) {
              using text::format_double;
              text::write_csv_record(o, {"tau", "p_completer", "mean_completer", "completer", "mean_noncompleter",
                                         "noncompleter", "total"});
              for (const auto& r : run.completer_decomposition)
                text::write_csv_record(o, {std::to_string(r.tau), format_double(r.p_completer),
                                           format_double(r.mean_completer), format_double(r.completer),
                                           format_double(r.mean_noncompleter), format_double(r.noncompleter),
                                           format_double(r.total)});
            }));
  std::string warnings;
  for (const auto& m : run.warnings) warnings += m + "\n";
  w.write("warnings.txt", warnings);
}

std::string truth_json(const SimTruth& truth, const SimConfig& cfg) {
  ojson j;
  j["delta"] = ojson::array();
  for (const auto& [key, v] : truth.delta) j["delta"].push_back({{"cohort", key.first}, {"tau", key.second}, {"value", v}});
  if (!truth.completer_delta.empty()) {
    j["completer_delta"] = ojson::array();
    for (const auto& [key, v] : truth.completer_delta)
      j["completer_delta"].push_back({{"cohort", key.first}, {"tau", key.second}, {"value", v}});
  }
  j["beta"] = ojson::array();
  for (const auto& [t, v] : truth.beta) j["beta"].push_back({{"quarter", t}, {"value", v}});
  j["shares"] = truth.shares;
  j["truncated"] = truth.truncated;
  j["alpha"] = cfg.alpha;
  return j.dump(2) + "\n";
}

}  // namespace

int run(const RunConfig& c, std::ostream& log) {
  c.validate();
  switch (c.command) {
    case Command::Estimate:
    case Command::Diagnose: {
      const auto data = in_stage("panel", 0, [&] { return load_input(c); });
      const bool estimates = c.command == Command::Estimate;
      const auto result = run_estimation(data, c, estimates);
      ArtifactWriter w(c.out);
      if (estimates)
        w.write("estimates.csv",
                render([&](std::ostream& o) { write_estimates(o, result.cohorts, result.aggregates); }));
      write_diagnostics(w, result);
      w.manifest(c);
      log << to_string(c.command) << ": " << result.n_workers << " workers, " << result.cohorts.size()
          << " cohort estimates, " << result.aggregates.size() << " aggregates, " << result.warnings.size()
          << " warnings -> " << c.out << "\n";
      return 0;
    }
    case Command::Simulate: {
      SimConfig sim = c.sim;
      sim.seed = *c.seed;
      if (c.window > 0) sim.S = c.window;
      auto [data, truth] = in_stage("simulation", 0, [&] { return simulate_panel(sim); });
      RunConfig next = c;
      next.sim = sim;
      next.covariates = data.covariate_spec.to_string();
      ArtifactWriter w(c.out);
      w.write("panel.csv", render([&](std::ostream& o) { write_panel(data, o); }));
      w.write("truth.json", truth_json(truth, sim));
      w.write("estimate.ini", estimate_config_for(next, "panel.csv"));
      w.manifest(c);
      log << "simulate: " << data.size() << " workers, S = " << sim.S << " -> " << c.out << "\n";
      return 0;
    }
    case Command::Costbenefit: {
      const auto scenario = in_stage("costbenefit", 0, [&] { return load_scenario(c.scenario); });
      const auto results = in_stage("costbenefit", 0, [&] { return evaluate(scenario); });
      const std::string json = to_json(results) + "\n";
      ArtifactWriter w(c.out);
      w.write("results.json", json);
      w.manifest(c);
      log << json;
      return 0;
    }
    case Command::Validate: {
      const std::uint64_t seed = *c.seed;
      std::vector<CheckResult> results;
      results.push_back(check_beta_grid());
      results.push_back(check_point_identification(25, seed));
      results.push_back(check_collapse(seed));
      CoverageOptions cov;
      cov.reps = c.validate_reps;
      cov.seed = seed;
      results.push_back(check_bound_coverage(cov));
      results.push_back(check_violation());
      print_results(log, results);
      ArtifactWriter w(c.out);
      w.write("validation.csv", render([&](std::ostream& o) {
                text::write_csv_record(o, {"check", "pass", "detail"});
                for (const auto& r : results) text::write_csv_record(o, {r.name, r.pass ? "true" : "false", r.detail});
              }));
      w.manifest(c);
      return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass; }) ? 0 : 1;
    }
  }
  return 1;
}

}  // namespace dynmatch
