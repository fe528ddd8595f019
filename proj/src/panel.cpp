#include "dynmatch/panel.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "dynmatch/text.hpp"

namespace dynmatch {

namespace {

// "<prefix>_m<k>" -> -k, "<prefix>_p<t>" -> t (t >= 1).
std::optional<int> quarter_suffix(std::string_view name, std::string_view prefix) {
  if (name.size() < prefix.size() + 3 || name.substr(0, prefix.size()) != prefix ||
      name[prefix.size()] != '_')
    return std::nullopt;
  char tag = name[prefix.size() + 1];
  std::string_view digits = name.substr(prefix.size() + 2);
  if (digits.empty() || !std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; }))
    return std::nullopt;
  auto k = text::parse_int(digits);
  if (!k || *k > 100000) return std::nullopt;
  if (tag == 'm') return -static_cast<int>(*k);
  if (tag == 'p' && *k >= 1) return static_cast<int>(*k);
  return std::nullopt;
}

std::string quarter_column(std::string_view prefix, int q) {
  return std::string(prefix) + (q <= 0 ? "_m" + std::to_string(-q) : "_p" + std::to_string(q));
}

const char* role_name(CovariateRole role, bool categorical) {
  switch (role) {
    case CovariateRole::EarningsLag: return "lag";
    case CovariateRole::ExactKey: return "key";
    case CovariateRole::Demographic: return categorical ? "cat" : "demo";
  }
  return "demo";
}

std::string cell_value(const Worker& w, const std::string& key) {
  if (key == "layoff_q") return std::to_string(w.layoff_quarter);
  auto it = w.covariates.find(key);
  if (it == w.covariates.end()) return {};
  if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
  return text::format_double(std::get<double>(it->second));
}

bool is_builtin(std::string_view name) {
  return name == "id" || name == "layoff_q" || name == "enroll_q" || name == "completer";
}

// Parses the static part of one row (everything except quarter series).
struct StaticColumns {
  std::size_t id = 0, layoff = 0, enroll = 0;
  std::optional<std::size_t> completer;
  std::vector<std::pair<const CovariateDef*, std::size_t>> covariates;
};

StaticColumns map_static(const std::vector<std::string>& header, const CovariateSpec& schema) {
  std::unordered_map<std::string, std::size_t> pos;
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (!pos.emplace(header[i], i).second) throw SchemaError("duplicate column '" + header[i] + "'");
  }
  auto need = [&](const std::string& name) {
    auto it = pos.find(name);
    if (it == pos.end()) throw SchemaError("missing required column '" + name + "'");
    return it->second;
  };
  StaticColumns cols;
  cols.id = need("id");
  cols.layoff = need("layoff_q");
  cols.enroll = need("enroll_q");
  if (auto it = pos.find("completer"); it != pos.end()) cols.completer = it->second;
  for (const auto& def : schema.defs) {
    if (def.role == CovariateRole::EarningsLag) continue;
    if (def.role == CovariateRole::ExactKey && def.name == "layoff_q") continue;
    cols.covariates.emplace_back(&def, need(def.name));
  }
  return cols;
}

void parse_static(const std::vector<std::string>& f, const StaticColumns& cols, std::size_t row,
                  int window, Worker& w, std::vector<Violation>& out) {
  w.id = std::string(text::trim(f[cols.id]));
  if (w.id.empty()) out.push_back({row, "id", "empty id"});
  if (auto v = text::parse_int(f[cols.layoff])) {
    w.layoff_quarter = static_cast<int>(*v);
  } else {
    out.push_back({row, "layoff_q", "not an integer"});
  }
  auto enroll = text::trim(f[cols.enroll]);
  if (!enroll.empty()) {
    auto v = text::parse_int(enroll);
    if (!v) {
      out.push_back({row, "enroll_q", "not an integer"});
    } else if (*v < 1 || *v > window) {
      out.push_back({row, "enroll_q", "enroll_q " + std::to_string(*v) + " outside 1.." + std::to_string(window)});
    } else {
      w.enroll_quarter = static_cast<int>(*v);
    }
  }
  if (cols.completer) {
    auto c = text::trim(f[*cols.completer]);
    if (c == "1") w.completer = true;
    else if (c == "0") w.completer = false;
    else if (!c.empty()) out.push_back({row, "completer", "expected 0, 1 or empty"});
  }
  for (const auto& [def, idx] : cols.covariates) {
    auto raw = text::trim(f[idx]);
    if (raw.empty()) {
      out.push_back({row, def->name, "missing value"});
      continue;
    }
    if (def->categorical || def->role == CovariateRole::ExactKey) {
      w.covariates[def->name] = std::string(raw);
    } else if (auto v = text::parse_double(raw)) {
      w.covariates[def->name] = *v;
    } else {
      out.push_back({row, def->name, "not numeric"});
    }
  }
}

void set_series_value(QuarterSeries& series, std::string_view raw, int q, const std::string& field,
                      std::size_t row, bool nonnegative, std::vector<Violation>& out) {
  raw = text::trim(raw);
  if (raw.empty()) return;
  auto v = text::parse_double(raw);
  if (!v || is_missing(*v)) {
    out.push_back({row, field, "not numeric"});
    return;
  }
  if (nonnegative && *v < 0) {
    out.push_back({row, field, "negative earnings " + std::string(raw)});
    return;
  }
  series.set(q, *v);
}

[[noreturn]] void throw_violations(std::vector<Violation> v) {
  std::stable_sort(v.begin(), v.end(), [](const Violation& a, const Violation& b) { return a.row < b.row; });
  throw ValidationError(std::move(v));
}

PanelDataset finish(PanelDataset data, std::vector<Violation> parse_errors) {
  if (!parse_errors.empty()) throw_violations(std::move(parse_errors));
  auto semantic = data.validate();
  if (!semantic.empty()) throw_violations(std::move(semantic));
  return data;
}

void check_window(int window) {
  if (window < 1) throw DomainError("window length must be positive");
}

}  // namespace

// --- QuarterSeries ---------------------------------------------------------

void QuarterSeries::set(int quarter, double value) {
  if (values_.empty()) {
    first_ = quarter;
    values_.assign(1, value);
    return;
  }
  if (quarter < first_) {
    values_.insert(values_.begin(), static_cast<std::size_t>(first_ - quarter), kMissing);
    first_ = quarter;
  } else if (quarter > last_quarter()) {
    values_.resize(static_cast<std::size_t>(quarter - first_ + 1), kMissing);
  }
  values_[static_cast<std::size_t>(quarter - first_)] = value;
}

double QuarterSeries::value_or_missing(int quarter) const {
  if (values_.empty() || quarter < first_ || quarter > last_quarter()) return kMissing;
  return values_[static_cast<std::size_t>(quarter - first_)];
}

std::optional<double> QuarterSeries::at(int quarter) const {
  double v = value_or_missing(quarter);
  if (is_missing(v)) return std::nullopt;
  return v;
}

bool QuarterSeries::operator==(const QuarterSeries& other) const {
  // Compare present values only; storage bounds may differ.
  auto lo = [](const QuarterSeries& s) { return s.empty() ? 0 : s.first_quarter(); };
  auto hi = [](const QuarterSeries& s) { return s.empty() ? -1 : s.last_quarter(); };
  int a = std::min(lo(*this), lo(other));
  int b = std::max(hi(*this), hi(other));
  for (int q = a; q <= b; ++q) {
    double x = value_or_missing(q), y = other.value_or_missing(q);
    if (is_missing(x) != is_missing(y)) return false;
    if (!is_missing(x) && x != y) return false;
  }
  return true;
}

// --- CovariateSpec ---------------------------------------------------------

CovariateSpec CovariateSpec::parse(std::string_view spec_text) {
  CovariateSpec spec;
  std::set<std::string> seen;
  for (const auto& token : text::split(spec_text, ',')) {
    if (token.empty()) continue;
    auto colon = token.rfind(':');
    if (colon == std::string::npos) throw SchemaError("covariate '" + token + "' lacks a role tag");
    std::string name(text::trim(std::string_view(token).substr(0, colon)));
    std::string role(text::trim(std::string_view(token).substr(colon + 1)));
    if (name.empty()) throw SchemaError("empty covariate name in '" + token + "'");
    if (!seen.insert(name).second) throw SchemaError("covariate '" + name + "' listed twice");
    if (is_builtin(name) && !(name == "layoff_q" && role == "key"))
      throw SchemaError("'" + name + "' is a reserved column");
    if (role == "aux") {
      spec.aux_series.push_back(name);
      continue;
    }
    CovariateDef def;
    def.name = name;
    if (role == "lag") {
      auto q = quarter_suffix(name, "y");
      if (!q || *q > 0) throw SchemaError("earnings lag '" + name + "' must be named y_m<k>");
      def.role = CovariateRole::EarningsLag;
      def.quarter = *q;
    } else if (role == "demo") {
      def.role = CovariateRole::Demographic;
    } else if (role == "cat") {
      def.role = CovariateRole::Demographic;
      def.categorical = true;
    } else if (role == "key") {
      def.role = CovariateRole::ExactKey;
      def.categorical = true;
    } else {
      throw SchemaError("unknown role '" + role + "' for covariate '" + name + "'");
    }
    spec.defs.push_back(def);
  }
  return spec;
}

std::string CovariateSpec::to_string() const {
  std::string out;
  for (const auto& d : defs) {
    if (!out.empty()) out += ',';
    out += d.name + ":" + role_name(d.role, d.categorical);
  }
  for (const auto& a : aux_series) {
    if (!out.empty()) out += ',';
    out += a + ":aux";
  }
  return out;
}

std::vector<std::string> CovariateSpec::exact_keys() const {
  std::vector<std::string> keys;
  for (const auto& d : defs)
    if (d.role == CovariateRole::ExactKey) keys.push_back(d.name);
  return keys;
}

const CovariateDef* CovariateSpec::find(std::string_view name) const {
  for (const auto& d : defs)
    if (d.name == name) return &d;
  return nullptr;
}

// --- ValidationError -------------------------------------------------------

namespace {
std::string summarize(const std::vector<Violation>& v) {
  std::ostringstream ss;
  ss << v.size() << " validation error(s)";
  for (std::size_t i = 0; i < v.size() && i < 5; ++i)
    ss << (i ? "; " : ": ") << "row " << v[i].row << " " << v[i].field << ": " << v[i].violation;
  if (v.size() > 5) ss << "; ...";
  return ss.str();
}
}  // namespace

ValidationError::ValidationError(std::vector<Violation> violations)
    : Error(summarize(violations)), violations_(std::move(violations)) {}

std::string ValidationError::to_json() const {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : violations_) arr.push_back({{"row", v.row}, {"field", v.field}, {"violation", v.violation}});
  return arr.dump(2);
}

// --- PanelDataset ----------------------------------------------------------

IndexList PanelDataset::enrollees(int s) const {
  IndexList out;
  for (WorkerIndex i = 0; i < workers.size(); ++i)
    if (workers[i].enroll_quarter == s) out.push_back(i);
  return out;
}

IndexList PanelDataset::never_enrollees() const {
  IndexList out;
  for (WorkerIndex i = 0; i < workers.size(); ++i)
    if (!workers[i].enrolled()) out.push_back(i);
  return out;
}

std::vector<std::string> PanelDataset::levels(const std::string& covariate) const {
  std::set<std::string> lv;
  for (const auto& w : workers) {
    auto it = w.covariates.find(covariate);
    if (it == w.covariates.end()) continue;
    if (const auto* s = std::get_if<std::string>(&it->second)) lv.insert(*s);
    else lv.insert(text::format_double(std::get<double>(it->second)));
  }
  return {lv.begin(), lv.end()};
}

std::vector<Violation> PanelDataset::validate() {
  std::vector<Violation> out;
  if (window_length < 1) out.push_back({0, "window_length", "must be positive"});
  const auto keys = covariate_spec.exact_keys();
  std::unordered_map<std::string, std::size_t> ids;
  for (std::size_t i = 0; i < workers.size(); ++i) {
    auto& w = workers[i];
    const std::size_t row = i + 1;
    if (!ids.emplace(w.id, row).second)
      out.push_back({row, "id", "duplicate id '" + w.id + "' (first at row " + std::to_string(ids[w.id]) + ")"});
    if (w.enroll_quarter && (*w.enroll_quarter < 1 || *w.enroll_quarter > window_length))
      out.push_back({row, "enroll_q", "enroll_q " + std::to_string(*w.enroll_quarter) + " outside 1.." +
                                          std::to_string(window_length)});
    if (!w.earnings.empty()) {
      for (int q = w.earnings.first_quarter(); q <= w.earnings.last_quarter(); ++q) {
        double v = w.earnings.value_or_missing(q);
        if (!is_missing(v) && v < 0)
          out.push_back({row, quarter_column("y", q), "negative earnings " + text::format_double(v)});
      }
    }
    for (const auto& def : covariate_spec.defs) {
      if (def.role == CovariateRole::EarningsLag) {
        if (!w.earnings.has(def.quarter)) out.push_back({row, def.name, "required lag quarter missing"});
      } else if (!(def.role == CovariateRole::ExactKey && def.name == "layoff_q")) {
        auto it = w.covariates.find(def.name);
        if (it == w.covariates.end()) {
          out.push_back({row, def.name, "missing value"});
        } else if (!def.categorical && !std::holds_alternative<double>(it->second)) {
          out.push_back({row, def.name, "not numeric"});
        }
      }
    }
    // Interim quarters 1..s-1 enter X^s for every cohort the worker is at risk in.
    int last_interim = (w.enroll_quarter ? std::min(*w.enroll_quarter, window_length) : window_length) - 1;
    for (int q = 1; q <= last_interim; ++q)
      if (!w.earnings.has(q)) out.push_back({row, quarter_column("y", q), "required interim quarter missing"});
    w.cell_keys.clear();
    for (const auto& k : keys) w.cell_keys.push_back(cell_value(w, k));
  }
  return out;
}

// --- I/O -------------------------------------------------------------------

PanelDataset read_panel(std::istream& in, const CovariateSpec& schema, int window) {
  check_window(window);
  std::vector<std::string> header;
  if (!text::read_csv_record(in, header)) throw SchemaError("empty input: no header row");
  for (auto& h : header) h = std::string(text::trim(h));
  const StaticColumns cols = map_static(header, schema);

  struct SeriesColumn {
    std::size_t index;
    int quarter;
    std::string aux;  // empty = earnings
  };
  std::vector<SeriesColumn> series;
  std::set<std::size_t> used{cols.id, cols.layoff, cols.enroll};
  if (cols.completer) used.insert(*cols.completer);
  for (const auto& c : cols.covariates) used.insert(c.second);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (used.count(i)) continue;
    if (auto q = quarter_suffix(header[i], "y")) {
      series.push_back({i, *q, {}});
      continue;
    }
    bool matched = false;
    for (const auto& a : schema.aux_series) {
      if (auto q = quarter_suffix(header[i], a)) {
        series.push_back({i, *q, a});
        matched = true;
        break;
      }
    }
    if (!matched) throw SchemaError("column '" + header[i] + "' is not declared in the schema");
  }
  for (const auto& def : schema.defs) {
    if (def.role == CovariateRole::EarningsLag &&
        std::none_of(series.begin(), series.end(), [&](const SeriesColumn& c) { return c.aux.empty() && c.quarter == def.quarter; }))
      throw SchemaError("missing required column '" + def.name + "'");
  }

  PanelDataset data;
  data.window_length = window;
  data.covariate_spec = schema;
  std::vector<Violation> errors;
  std::vector<std::string> f;
  std::size_t row = 0;
  while (text::read_csv_record(in, f)) {
    ++row;
    if (f.size() != header.size()) {
      errors.push_back({row, "*", "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size())});
      continue;
    }
    Worker w;
    parse_static(f, cols, row, window, w, errors);
    for (const auto& c : series) {
      if (c.aux.empty()) {
        set_series_value(w.earnings, f[c.index], c.quarter, header[c.index], row, true, errors);
      } else {
        set_series_value(w.aux[c.aux], f[c.index], c.quarter, header[c.index], row, false, errors);
      }
    }
    for (const auto& a : schema.aux_series) w.aux.try_emplace(a);
    data.workers.push_back(std::move(w));
  }
  return finish(std::move(data), std::move(errors));
}

PanelDataset load_panel(const std::string& path, const CovariateSpec& schema, int window) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open input file " + path);
  return read_panel(in, schema, window);
}

PanelDataset load_panel_long(const std::string& static_path, const std::string& long_path,
                             const CovariateSpec& schema, int window) {
  check_window(window);
  std::ifstream sin(static_path);
  if (!sin) throw Error("cannot open input file " + static_path);
  std::ifstream lin(long_path);
  if (!lin) throw Error("cannot open input file " + long_path);

  std::vector<std::string> header;
  if (!text::read_csv_record(sin, header)) throw SchemaError("empty static table");
  for (auto& h : header) h = std::string(text::trim(h));
  const StaticColumns cols = map_static(header, schema);

  PanelDataset data;
  data.window_length = window;
  data.covariate_spec = schema;
  std::vector<Violation> errors;
  std::unordered_map<std::string, std::size_t> by_id;
  std::vector<std::string> f;
  std::size_t row = 0;
  while (text::read_csv_record(sin, f)) {
    ++row;
    if (f.size() != header.size()) {
      errors.push_back({row, "*", "field count mismatch"});
      continue;
    }
    Worker w;
    parse_static(f, cols, row, window, w, errors);
    for (const auto& a : schema.aux_series) w.aux.try_emplace(a);
    by_id.emplace(w.id, data.workers.size());
    data.workers.push_back(std::move(w));
  }

  std::vector<std::string> lheader;
  if (!text::read_csv_record(lin, lheader)) throw SchemaError("empty long table");
  std::unordered_map<std::string, std::size_t> lpos;
  for (std::size_t i = 0; i < lheader.size(); ++i) lpos[std::string(text::trim(lheader[i]))] = i;
  for (const char* need : {"id", "rel_quarter", "earnings"})
    if (!lpos.count(need)) throw SchemaError(std::string("long table lacks column '") + need + "'");
  row = 0;
  while (text::read_csv_record(lin, f)) {
    ++row;
    if (f.size() != lheader.size()) {
      errors.push_back({row, "*", "long table field count mismatch"});
      continue;
    }
    auto id = std::string(text::trim(f[lpos["id"]]));
    auto it = by_id.find(id);
    if (it == by_id.end()) {
      errors.push_back({row, "id", "unknown id '" + id + "' in long table"});
      continue;
    }
    auto q = text::parse_int(f[lpos["rel_quarter"]]);
    if (!q) {
      errors.push_back({row, "rel_quarter", "not an integer"});
      continue;
    }
    auto& series = data.workers[it->second].earnings;
    if (series.has(static_cast<int>(*q))) {
      errors.push_back({row, "rel_quarter", "duplicate quarter for id '" + id + "'"});
      continue;
    }
    set_series_value(series, f[lpos["earnings"]], static_cast<int>(*q), "earnings", row, true, errors);
  }
  return finish(std::move(data), std::move(errors));
}

void write_panel(const PanelDataset& data, std::ostream& out) {
  const auto& spec = data.covariate_spec;
  std::vector<std::string> header{"id", "layoff_q", "enroll_q", "completer"};
  std::vector<const CovariateDef*> cov;
  for (const auto& d : spec.defs) {
    if (d.role == CovariateRole::EarningsLag) continue;
    if (d.role == CovariateRole::ExactKey && d.name == "layoff_q") continue;
    cov.push_back(&d);
    header.push_back(d.name);
  }
  auto quarter_range = [&](auto&& get) {
    int lo = 1, hi = 0;
    bool any = false;
    for (const auto& w : data.workers) {
      const QuarterSeries* s = get(w);
      if (!s || s->empty()) continue;
      lo = any ? std::min(lo, s->first_quarter()) : s->first_quarter();
      hi = any ? std::max(hi, s->last_quarter()) : s->last_quarter();
      any = true;
    }
    std::vector<int> qs;
    if (!any) return qs;
    // Lags first in descending k, then post-layoff quarters.
    for (int q = std::min(lo, 0); q <= hi; ++q) qs.push_back(q);
    return qs;
  };
  auto earnings_q = quarter_range([](const Worker& w) { return &w.earnings; });
  for (int q : earnings_q) header.push_back(quarter_column("y", q));
  std::vector<std::vector<int>> aux_q;
  for (const auto& a : spec.aux_series) {
    aux_q.push_back(quarter_range([&](const Worker& w) -> const QuarterSeries* {
      auto it = w.aux.find(a);
      return it == w.aux.end() ? nullptr : &it->second;
    }));
    for (int q : aux_q.back()) header.push_back(quarter_column(a, q));
  }
  text::write_csv_record(out, header);

  std::vector<std::string> f;
  for (const auto& w : data.workers) {
    f.clear();
    f.push_back(w.id);
    f.push_back(std::to_string(w.layoff_quarter));
    f.push_back(w.enroll_quarter ? std::to_string(*w.enroll_quarter) : "");
    f.push_back(w.completer ? (*w.completer ? "1" : "0") : "");
    for (const auto* d : cov) f.push_back(cell_value(w, d->name));
    for (int q : earnings_q) f.push_back(text::format_double(w.earnings.value_or_missing(q)));
    for (std::size_t a = 0; a < spec.aux_series.size(); ++a) {
      auto it = w.aux.find(spec.aux_series[a]);
      for (int q : aux_q[a]) f.push_back(it == w.aux.end() ? "" : text::format_double(it->second.value_or_missing(q)));
    }
    text::write_csv_record(out, f);
  }
}

void write_panel(const PanelDataset& data, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  write_panel(data, out);
}

// --- Cohort views ----------------------------------------------------------

namespace {

struct ColumnPlan {
  const CovariateDef* def;
  std::string level;  // categorical indicator level, empty otherwise
};

std::vector<ColumnPlan> baseline_plan(const PanelDataset& data, std::vector<std::string>* names) {
  std::vector<ColumnPlan> plan;
  for (const auto& d : data.covariate_spec.defs) {
    if (d.role == CovariateRole::ExactKey) continue;
    if (d.categorical) {
      auto lv = data.levels(d.name);
      for (std::size_t i = 1; i < lv.size(); ++i) {
        plan.push_back({&d, lv[i]});
        if (names) names->push_back(d.name + "=" + lv[i]);
      }
    } else {
      plan.push_back({&d, {}});
      if (names) names->push_back(d.name);
    }
  }
  return plan;
}

double baseline_value(const Worker& w, const ColumnPlan& c) {
  const auto& d = *c.def;
  if (d.role == CovariateRole::EarningsLag) return w.earnings.value_or_missing(d.quarter);
  auto it = w.covariates.find(d.name);
  if (it == w.covariates.end()) return kMissing;
  if (d.categorical) {
    const auto* s = std::get_if<std::string>(&it->second);
    std::string v = s ? *s : text::format_double(std::get<double>(it->second));
    return v == c.level ? 1.0 : 0.0;
  }
  const auto* x = std::get_if<double>(&it->second);
  return x ? *x : kMissing;
}

void check_cohort(const PanelDataset& data, int s) {
  if (s < 1 || s > data.window_length)
    throw DomainError("cohort " + std::to_string(s) + " outside 1.." + std::to_string(data.window_length));
}

}  // namespace

std::vector<std::string> design_columns(const PanelDataset& data, int s) {
  check_cohort(data, s);
  std::vector<std::string> names;
  baseline_plan(data, &names);
  for (int q = 1; q < s; ++q) names.push_back(quarter_column("y", q));
  return names;
}

CohortView build_cohort_view(const PanelDataset& data, int s) {
  check_cohort(data, s);
  CohortView v;
  v.cohort = s;
  for (WorkerIndex i = 0; i < data.workers.size(); ++i) {
    const auto& e = data.workers[i].enroll_quarter;
    if (e && *e < s) continue;
    v.at_risk.push_back(i);
    if (!e) v.controls.push_back(i);
    else if (*e == s) v.treated.push_back(i);
    else v.later.push_back(i);
  }
  auto plan = baseline_plan(data, &v.columns);
  v.baseline_columns = plan.size();
  for (int q = 1; q < s; ++q) v.columns.push_back(quarter_column("y", q));

  const auto n = static_cast<Eigen::Index>(v.at_risk.size());
  v.design.resize(n, static_cast<Eigen::Index>(v.columns.size()));
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto& w = data.workers[v.at_risk[static_cast<std::size_t>(r)]];
    Eigen::Index c = 0;
    for (const auto& p : plan) v.design(r, c++) = baseline_value(w, p);
    for (int q = 1; q < s; ++q) v.design(r, c++) = w.earnings.value_or_missing(q);
  }
  return v;
}

Eigen::Index CohortView::row_of(WorkerIndex worker) const {
  auto it = std::lower_bound(at_risk.begin(), at_risk.end(), worker);
  if (it == at_risk.end() || *it != worker) return -1;
  return static_cast<Eigen::Index>(it - at_risk.begin());
}

IndexList CohortView::fit_pool(bool conditional) const {
  if (!conditional) return at_risk;
  IndexList pool;
  pool.reserve(treated.size() + controls.size());
  std::merge(treated.begin(), treated.end(), controls.begin(), controls.end(), std::back_inserter(pool));
  return pool;
}

MatrixXd CohortView::rows(std::span<const WorkerIndex> workers) const {
  MatrixXd out(static_cast<Eigen::Index>(workers.size()), design.cols());
  for (std::size_t i = 0; i < workers.size(); ++i) {
    auto r = row_of(workers[i]);
    if (r < 0) throw DomainError("worker " + std::to_string(workers[i]) + " is not at risk in cohort " + std::to_string(cohort));
    out.row(static_cast<Eigen::Index>(i)) = design.row(r);
  }
  return out;
}

// --- Trajectories ----------------------------------------------------------

std::map<int, TrajectoryPoint> event_time_trajectory(const PanelDataset& data,
                                                     std::span<const AlignedMember> group,
                                                     int tau_min, int tau_max) {
  if (tau_min > tau_max) throw DomainError("tau_min exceeds tau_max");
  std::map<int, TrajectoryPoint> out;
  std::vector<double> sum(static_cast<std::size_t>(tau_max - tau_min + 1), 0.0);
  for (int tau = tau_min; tau <= tau_max; ++tau) out[tau] = TrajectoryPoint{};
  for (const auto& m : group) {
    if (m.worker >= data.workers.size()) throw DomainError("worker index out of range");
    const auto& e = data.workers[m.worker].earnings;
    for (int tau = tau_min; tau <= tau_max; ++tau) {
      double y = e.value_or_missing(m.align_quarter + tau);
      if (is_missing(y)) continue;
      auto& p = out[tau];
      sum[static_cast<std::size_t>(tau - tau_min)] += m.weight * y;
      p.weight += m.weight;
      ++p.count;
    }
  }
  for (auto& [tau, p] : out)
    if (p.weight > 0) p.mean = sum[static_cast<std::size_t>(tau - tau_min)] / p.weight;
  return out;
}

std::map<int, TrajectoryPoint> event_time_trajectory(const PanelDataset& data,
                                                     std::span<const WorkerIndex> group,
                                                     const std::map<WorkerIndex, int>& alignment,
                                                     int tau_min, int tau_max) {
  std::vector<AlignedMember> members;
  members.reserve(group.size());
  for (auto w : group) {
    auto it = alignment.find(w);
    if (it == alignment.end()) {
      if (w < data.workers.size() && data.workers[w].enroll_quarter) {
        members.push_back({w, *data.workers[w].enroll_quarter, 1.0});
        continue;
      }
      throw DomainError("worker " + std::to_string(w) + " has no alignment quarter");
    }
    members.push_back({w, it->second, 1.0});
  }
  return event_time_trajectory(data, members, tau_min, tau_max);
}

VectorXd outcome_at(const PanelDataset& data, int quarter) {
  VectorXd y(static_cast<Eigen::Index>(data.workers.size()));
  for (std::size_t i = 0; i < data.workers.size(); ++i)
    y(static_cast<Eigen::Index>(i)) = data.workers[i].earnings.value_or_missing(quarter);
  return y;
}

}  // namespace dynmatch
