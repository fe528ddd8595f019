#ifndef DYNMATCH_COSTBENEFIT_HPP
#define DYNMATCH_COSTBENEFIT_HPP

#include <cmath>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dynmatch/core.hpp"

namespace dynmatch {

/// Present value of `stream[t-1]` received at the end of year t, t >= 1.
template <typename Scalar>
Scalar npv(std::span<const Scalar> stream, Scalar rate) {
  if (!(rate > Scalar(-1))) throw DomainError("npv: rate must exceed -1");
  Scalar total = 0, discount = 1;
  for (const Scalar& v : stream) {
    discount /= Scalar(1) + rate;
    total += v * discount;
  }
  return total;
}

/// Present value of a cash flow whose first element falls at year 0.
template <typename Scalar>
Scalar npv_from_zero(std::span<const Scalar> cashflow, Scalar rate) {
  if (cashflow.empty()) return Scalar(0);
  return cashflow.front() + npv<Scalar>(cashflow.subspan(1), rate);
}

double benefit_cost_ratio(double npv, double cost);

struct IrrResult {
  double rate = kMissing;
  bool multiple_roots = false;  // more than one sign change of NPV over the bracket
};

/// Smallest rate in (-0.99, 10) with zero NPV for a cash flow starting at
/// year 0. The bracket is located on a grid and refined by bisection down to
/// adjacent doubles. Throws DomainError when no root is bracketed.
IrrResult irr(std::span<const double> cashflow);

/// Smallest T with npv(stream[1..T]) >= cost.
std::optional<int> breakeven_year(std::span<const double> stream, double cost, double rate);

/// Holds the last value through year `years`; longer streams are returned
/// unchanged.
std::vector<double> extend_stream(std::span<const double> stream, int years);

struct Loan {
  double principal = 0.0;
  double nominal_rate = 0.068;
  double inflation = 0.02;
  int years = 10;

  double real_rate() const { return (1.0 + nominal_rate) / (1.0 + inflation) - 1.0; }
  /// Level real payment at the end of each year.
  double payment() const;
};

struct CbScenario {
  std::vector<double> impacts;            // yearly earnings impacts, years 1..H
  std::vector<bool> placeholder;          // impacts not taken from a source, same length
  int horizon = 30;                       // last year of the extended stream
  double discount_rate = 0.02;
  double tax_rate = 0.25;
  double private_cost = 0.0;
  double social_cost = 0.0;
  std::optional<Loan> loan;

  void validate() const;
  std::vector<double> stream() const { return extend_stream(impacts, horizon); }
};

/// Reads a key-value scenario file:
///   [scenario] impacts (comma list), placeholder_years (comma list),
///   horizon, discount_rate, tax_rate, private_cost, social_cost;
///   optional [loan] principal, nominal_rate, inflation, years.
CbScenario load_scenario(const std::string& path);
CbScenario read_scenario(std::istream& in);

struct CbResults {
  double npv_social = kMissing;   // pre-tax impacts
  double npv_private = kMissing;  // post-tax impacts
  double bcr_private = kMissing;
  double bcr_social = kMissing;
  IrrResult irr_private;
  IrrResult irr_social;
  std::optional<int> breakeven_private;
  std::optional<int> breakeven_social;
  std::optional<IrrResult> irr_private_loan;
};

CbResults evaluate(const CbScenario& scenario);

/// JSON object with the result fields; absent values are null.
std::string to_json(const CbResults& results);

}  // namespace dynmatch

#endif  // DYNMATCH_COSTBENEFIT_HPP
