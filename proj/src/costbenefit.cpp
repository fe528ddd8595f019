#include "dynmatch/costbenefit.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include "dynmatch/text.hpp"

namespace dynmatch {

double benefit_cost_ratio(double npv, double cost) {
  if (!(cost > 0)) throw DomainError("benefit-cost ratio: cost must be positive");
  return npv / cost;
}

IrrResult irr(std::span<const double> cashflow) {
  bool pos = false, neg = false;
  for (double c : cashflow) {
    pos = pos || c > 0;
    neg = neg || c < 0;
  }
  if (!pos || !neg) throw DomainError("irr: cash flow never changes sign");
  auto f = [&](double r) { return npv_from_zero<double>(cashflow, r); };

  // Grid uniform in log(1 + r) over the bracket.
  constexpr int kGrid = 2000;
  const double a = std::log(0.01), b = std::log(11.0);
  std::vector<double> rates(kGrid + 1), values(kGrid + 1);
  for (int i = 0; i <= kGrid; ++i) {
    rates[i] = i == 0 ? -0.99 : i == kGrid ? 10.0 : std::exp(a + (b - a) * i / kGrid) - 1.0;
    values[i] = f(rates[i]);
  }
  IrrResult res;
  int changes = 0;
  std::optional<int> first;
  bool exact = false;
  int last = -1;  // previous grid point with nonzero NPV
  for (int i = 0; i <= kGrid; ++i) {
    if (values[i] == 0.0) {
      ++changes;
      if (!first) first = i, exact = true;
      last = -1;
      continue;
    }
    if (last >= 0 && (values[last] < 0) != (values[i] < 0)) {
      ++changes;
      if (!first) first = last;
    }
    last = i;
  }
  if (!first) throw DomainError("irr: no root in (-0.99, 10)");
  res.multiple_roots = changes > 1;
  if (exact) {
    res.rate = rates[static_cast<std::size_t>(*first)];
    return res;
  }
  double lo = rates[static_cast<std::size_t>(*first)], hi = rates[static_cast<std::size_t>(*first) + 1];
  double flo = values[static_cast<std::size_t>(*first)];
  for (int it = 0; it < 400; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0 || mid <= lo || mid >= hi) {
      lo = hi = mid;
      break;
    }
    if ((fm < 0) == (flo < 0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  res.rate = 0.5 * (lo + hi);
  return res;
}

std::optional<int> breakeven_year(std::span<const double> stream, double cost, double rate) {
  if (!(rate > -1)) throw DomainError("breakeven: rate must exceed -1");
  double total = 0, discount = 1;
  for (std::size_t t = 0; t < stream.size(); ++t) {
    discount /= 1.0 + rate;
    total += stream[t] * discount;
    if (total >= cost) return static_cast<int>(t + 1);
  }
  return std::nullopt;
}

std::vector<double> extend_stream(std::span<const double> stream, int years) {
  std::vector<double> out(stream.begin(), stream.end());
  if (out.empty()) return out;
  while (static_cast<int>(out.size()) < years) out.push_back(out.back());
  return out;
}

double Loan::payment() const {
  if (years < 1) throw DomainError("loan: term must be at least one year");
  const double r = real_rate();
  if (r == 0.0) return principal / years;
  return principal * r / (1.0 - std::pow(1.0 + r, -years));
}

void CbScenario::validate() const {
  if (impacts.empty()) throw DomainError("scenario: empty impact stream");
  if (!placeholder.empty() && placeholder.size() != impacts.size())
    throw DomainError("scenario: placeholder flags do not match the impact stream");
  if (!(discount_rate > -1)) throw DomainError("scenario: discount_rate must exceed -1");
  if (!(tax_rate >= 0 && tax_rate < 1)) throw DomainError("scenario: tax_rate must lie in [0, 1)");
  if (private_cost < 0 || social_cost < 0) throw DomainError("scenario: costs must be nonnegative");
  if (loan && (loan->principal < 0 || loan->principal > private_cost))
    throw DomainError("scenario: loan principal must lie in [0, private_cost]");
}

namespace {

std::vector<double> number_list(const std::string& s, const char* key) {
  std::vector<double> out;
  for (const auto& part : text::split(s, ',')) {
    auto v = text::parse_double(text::trim(part));
    if (!v) throw SchemaError(std::string("scenario: bad number in ") + key + ": '" + part + "'");
    out.push_back(*v);
  }
  return out;
}

}  // namespace

CbScenario read_scenario(std::istream& in) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw SchemaError(std::string("scenario: ") + e.what());
  }
  CbScenario s;
  try {
    const auto& sc = tree.get_child("scenario");
    s.impacts = number_list(sc.get<std::string>("impacts"), "impacts");
    s.placeholder.assign(s.impacts.size(), false);
    if (auto p = sc.get_optional<std::string>("placeholder_years"))
      for (double y : number_list(*p, "placeholder_years")) {
        const auto i = static_cast<long>(y) - 1;
        if (i < 0 || i >= static_cast<long>(s.impacts.size()))
          throw SchemaError("scenario: placeholder year outside the impact stream");
        s.placeholder[static_cast<std::size_t>(i)] = true;
      }
    s.horizon = sc.get("horizon", s.horizon);
    s.discount_rate = sc.get("discount_rate", s.discount_rate);
    s.tax_rate = sc.get("tax_rate", s.tax_rate);
    s.private_cost = sc.get<double>("private_cost");
    s.social_cost = sc.get<double>("social_cost");
    if (auto loan = tree.get_child_optional("loan")) {
      Loan l;
      l.principal = loan->get("principal", s.private_cost);
      l.nominal_rate = loan->get("nominal_rate", l.nominal_rate);
      l.inflation = loan->get("inflation", l.inflation);
      l.years = loan->get("years", l.years);
      s.loan = l;
    }
  } catch (const pt::ptree_error& e) {
    throw SchemaError(std::string("scenario: ") + e.what());
  }
  s.validate();
  return s;
}

CbScenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open scenario file: " + path);
  return read_scenario(in);
}

CbResults evaluate(const CbScenario& scenario) {
  scenario.validate();
  const auto pre = scenario.stream();
  std::vector<double> post(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) post[i] = (1.0 - scenario.tax_rate) * pre[i];
  const double r = scenario.discount_rate;

  CbResults out;
  out.npv_social = npv<double>(pre, r);
  out.npv_private = npv<double>(post, r);
  out.bcr_social = benefit_cost_ratio(out.npv_social, scenario.social_cost);
  out.bcr_private = benefit_cost_ratio(out.npv_private, scenario.private_cost);

  auto flows = [](double cost, const std::vector<double>& s) {
    std::vector<double> f{-cost};
    f.insert(f.end(), s.begin(), s.end());
    return f;
  };
  out.irr_private = irr(flows(scenario.private_cost, post));
  out.irr_social = irr(flows(scenario.social_cost, pre));
  out.breakeven_private = breakeven_year(post, scenario.private_cost, r);
  out.breakeven_social = breakeven_year(pre, scenario.social_cost, r);

  if (scenario.loan) {
    const auto& loan = *scenario.loan;
    auto f = flows(scenario.private_cost - loan.principal, post);
    const double pay = loan.payment();
    for (int y = 1; y <= loan.years; ++y) {
      if (static_cast<std::size_t>(y) >= f.size()) f.push_back(0.0);
      f[static_cast<std::size_t>(y)] -= pay;
    }
    out.irr_private_loan = irr(f);
  }
  return out;
}

std::string to_json(const CbResults& r) {
  nlohmann::ordered_json j;
  auto opt = [](const std::optional<int>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
  j["npv_private"] = r.npv_private;
  j["npv_social"] = r.npv_social;
  j["bcr_private"] = r.bcr_private;
  j["bcr_social"] = r.bcr_social;
  j["irr_private"] = r.irr_private.rate;
  j["irr_social"] = r.irr_social.rate;
  j["breakeven_private"] = opt(r.breakeven_private);
  j["breakeven_social"] = opt(r.breakeven_social);
  if (r.irr_private_loan) j["irr_private_loan"] = r.irr_private_loan->rate;
  if (r.irr_private.multiple_roots || r.irr_social.multiple_roots) j["irr_multiple_roots"] = true;
  return j.dump(2);
}

}  // namespace dynmatch
