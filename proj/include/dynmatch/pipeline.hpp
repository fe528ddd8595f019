#ifndef DYNMATCH_PIPELINE_HPP
#define DYNMATCH_PIPELINE_HPP

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dynmatch/core.hpp"
#include "dynmatch/diagnostics.hpp"
#include "dynmatch/estimators.hpp"
#include "dynmatch/simulation.hpp"

namespace dynmatch {

inline constexpr const char* kVersion = "0.1.0";

enum class Command { Estimate, Simulate, Diagnose, Costbenefit, Validate };
const char* to_string(Command command);
std::optional<Command> parse_command(std::string_view name);

/// A referenced input file does not exist. The CLI exits with status 2.
class InputError : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  Command command = Command::Estimate;

  // [panel]
  std::string input;          // wide CSV
  std::string input_static;   // long layout: static table
  std::string input_long;     // long layout: id, rel_quarter, earnings
  std::string covariates;     // CovariateSpec grammar
  std::optional<std::vector<std::string>> exact_keys;  // default: keys of the covariate spec
  int window = 0;             // S; 0 takes the value from [simulate] or fails

  // [estimate]
  int neighbors = 1;
  bool all_ties = false;
  double trim = 0.99;
  std::vector<std::string> estimands{"lb", "ub", "nvl"};
  int tau_min = 0;
  int tau_max = 16;
  int bootstrap = 0;
  bool hajek = false;
  std::string subgroup;
  bool refit_subgroup = false;

  // [diagnostics]
  int overlap_bins = 60;
  bool interim = true;

  // [simulate]
  SimConfig sim;

  // [costbenefit]
  std::string scenario;

  // [validate]
  int validate_reps = 50;

  std::optional<std::uint64_t> seed;
  std::string out = "out";

  /// Sorted, normalized key-value text of every setting except the output
  /// directory; hashed into the manifest.
  std::string canonical() const;
  /// Throws DomainError on invalid settings and InputError on missing files.
  void validate() const;
};

/// Reads an INI file into `config`. Relative paths resolve against the
/// directory of the file.
void apply_config_file(RunConfig& config, const std::string& path);
void apply_config(RunConfig& config, std::istream& in, const std::string& base_dir);

/// Settings written next to a simulated panel so that `estimate --config`
/// can read it back.
std::string estimate_config_for(const RunConfig& config, const std::string& panel_file);

std::string sha256_hex(std::string_view bytes);

// --- Subgroups ----------------------------------------------------------------

/// Conjunction of `name op value` terms joined by `&&`. Names are covariates,
/// earnings columns y_m<k> / y_p<t>, or layoff_q, enroll_q (0 for never),
/// completer; ops are == != < <= > >=. Categorical covariates only support
/// == and !=. Workers lacking the value do not match.
class SubgroupFilter {
 public:
  static SubgroupFilter parse(std::string_view expr);
  bool matches(const Worker& worker) const;
  const std::string& text() const { return text_; }

 private:
  struct Term {
    std::string name;
    std::string op;
    std::string value;
  };
  std::vector<Term> terms_;
  std::string text_;
};

IndexList select(const PanelDataset& data, const SubgroupFilter& filter);

// --- Estimation pipeline ---------------------------------------------------------

struct EstimateRun {
  std::vector<CohortEstimate> cohorts;
  std::vector<AggregateEstimate> aggregates;
  std::vector<BalanceReport> balance;
  std::vector<std::pair<int, OverlapReport>> overlap;
  std::vector<InterimDifferential> interim;  // per cohort, then aggregated
  std::vector<CompleterComponents> completer_decomposition;
  std::string fits_json;
  std::vector<std::string> warnings;
  std::size_t n_workers = 0;
};

/// load -> cells -> score fits -> trim -> match -> estimands -> diagnostics.
/// `with_estimates` false skips estimands (the `diagnose` command).
EstimateRun run_estimation(const PanelDataset& data, const RunConfig& config, bool with_estimates = true);

PanelDataset load_input(const RunConfig& config);

/// Runs the command and writes its artifacts plus manifest.json under
/// config.out. Progress and the validate table go to `log`. Returns the
/// process exit status.
int run(const RunConfig& config, std::ostream& log);

}  // namespace dynmatch

#endif  // DYNMATCH_PIPELINE_HPP
