#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dqnlab/analysis.hpp"
#include "dqnlab/env.hpp"
#include "dqnlab/trainer.hpp"
#include "json.hpp"

namespace dqnlab {

inline constexpr const char* kToolName = "dqnlab";
inline constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kExitOk = 0, kExitCheckFailed = 1, kExitUsage = 2, kExitDiverged = 3 };

/// Bisection over the init radius for the largest delta at which at least
/// `min_converged` of `seeds` runs converge.
struct RadiusProbeConfig {
  bool enabled = false;
  double delta_max = 4.0;
  std::size_t steps = 8;
  std::size_t seeds = 10;
  std::size_t min_converged = 7;
};

struct SweepConfig {
  std::vector<std::size_t> buffer_sizes;
  std::vector<double> c_eps;
  std::vector<double> gammas;
  std::vector<double> radii;
  std::size_t seeds = 1;
  /// When positive, each run uses batch = max(1, round(N * batch_fraction)).
  double batch_fraction = 0.0;
  RadiusProbeConfig radius_probe;
};

/// A run converged when it finished, its greedy policy is optimal (if
/// required) and its final sup-Q error is at most sup_q_rel * max |Q*|.
struct ConvergenceRule {
  double sup_q_rel = 0.1;
  bool require_policy = true;
};

struct VerifyConfig {
  std::size_t fd_points = 100;
  double fd_tolerance = 1e-5;
  double bellman_tolerance = 1e-10;
  double rho_threshold = 1e-8;
  double gn_tolerance = 1e-3;
  double hessian_radius = 0.05;
  std::size_t hessian_samples = 5;
  double lipschitz_radius = 1e-3;
  std::size_t lipschitz_directions = 20;
  double lipschitz_factor = 5.0;
  double hbound_radius = 0.1;
  std::size_t hbound_buffer = 4096;
  std::vector<std::size_t> gap_buffer_sizes{256, 1024, 4096, 16384};
  std::size_t gap_redraws = 10;
  double gap_radius = 0.3;
  double gap_epsilon = 0.5;
  double gap_slope_min = -0.7;
  double gap_slope_max = -0.3;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  PlantParams instance;
  TrainConfig train;
  SweepConfig sweep;
  ConvergenceRule convergence;
  VerifyConfig verify;
  std::string output_dir = "out";
  /// Empty means <output_dir>/instance.json.
  std::string instance_path;
  std::size_t jobs = 1;
};

/// Every config key with its default value. Flags are the kebab-case key
/// paths of these leaves, e.g. schedule.c_eps -> --schedule-c-eps.
nlohmann::json default_config_json();

/// Recursively overlays `patch` on `base`; unknown keys are rejected.
void merge_config(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// Parses a flag value according to the type of the default leaf.
nlohmann::json parse_flag_value(const nlohmann::json& like, const std::string& text);

/// Leaf paths of a config document, e.g. {"schedule", "c_eps"}.
std::vector<std::vector<std::string>> config_leaves(const nlohmann::json& j);
std::string flag_name(const std::vector<std::string>& path);

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// FNV-1a of the canonical config, excluding keys that cannot change results
/// (output_dir, instance_path, jobs). 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);
nlohmann::json output_meta(const ExperimentConfig& cfg);
std::string csv_meta_line(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Seeds. Every random stream is derived from the master seed.

std::uint64_t instance_seed(const ExperimentConfig& cfg);
std::uint64_t train_seed(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Files

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);
nlohmann::json read_json_file(const std::filesystem::path& path);
/// Indented dump with a trailing newline.
std::string dump_json(const nlohmann::json& j);
std::string metrics_csv_text(const ExperimentConfig& cfg, std::span<const MetricsRecord> records);

Instance generate_instance(const ExperimentConfig& cfg);
/// Writes instance.json and wstar.json into `dir`.
void write_instance(const ExperimentConfig& cfg, const Instance& inst,
                    const std::filesystem::path& dir);
/// Reads instance.json and the W* file it references (relative to it).
Instance load_instance(const std::filesystem::path& instance_json);
std::filesystem::path instance_path(const ExperimentConfig& cfg);

// ---------------------------------------------------------------------------
// Runs and sweeps

double max_abs_q(const MdpSpec& spec, const NetworkWeights& w);
bool run_converged(std::span<const MetricsRecord> records, double max_abs_qstar,
                   const ConvergenceRule& rule);
/// fit_rate over the noise-floor window (10x plateau median); nullopt when the
/// window is degenerate.
std::optional<FitReport> run_rate(std::span<const MetricsRecord> records);

struct RunKey {
  std::size_t n_index = 0;
  std::size_t c_index = 0;
  std::size_t gamma_index = 0;
  std::size_t delta_index = 0;
  std::size_t trial = 0;
  auto operator<=>(const RunKey&) const = default;
  std::string id() const;
};

struct RunSpec {
  RunKey key;
  std::size_t buffer_size = 0;
  double c_eps = 0.0;
  double gamma = 0.0;
  double init_radius = 0.0;
  std::uint64_t seed = 0;
};

struct RunOutcome {
  RunSpec spec;
  std::vector<MetricsRecord> records;
  std::string status = "ok";  // ok | diverged | error
  std::string error;
  bool converged = false;
  double max_abs_qstar = 0.0;
};

/// Cartesian product of the sweep axes (an empty axis contributes the base
/// config value) times the trials. Seeds depend on the master seed, the N and
/// gamma indices and the trial, so c_eps and delta comparisons are paired.
std::vector<RunSpec> expand_sweep(const ExperimentConfig& cfg);
TrainConfig train_config_for(const ExperimentConfig& cfg, const RunSpec& run);
RunOutcome execute_run(const ExperimentConfig& cfg, const Instance& inst, const RunSpec& run);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

struct RadiusProbeResult {
  double c_eps = 0.0;
  double radius = 0.0;
  /// (delta, converged count) for every evaluated probe point, in order.
  std::vector<std::pair<double, std::size_t>> evaluations;
};
RadiusProbeResult probe_radius(const ExperimentConfig& cfg, const Instance& inst, double c_eps);

/// Sorts the runs by key, so the result does not depend on completion order.
nlohmann::json aggregate_runs(const ExperimentConfig& cfg, std::vector<RunOutcome> runs,
                              const std::vector<RadiusProbeResult>& radii = {});

// ---------------------------------------------------------------------------
// Verification

struct CheckResult {
  bool pass = false;
  double value = 0.0;
  double threshold = 0.0;
  nlohmann::json details = nlohmann::json::object();
};

std::map<std::string, CheckResult> verify_instance(const ExperimentConfig& cfg,
                                                   const Instance& inst);
nlohmann::json verify_report(const ExperimentConfig& cfg,
                             const std::map<std::string, CheckResult>& checks);

// ---------------------------------------------------------------------------
// Subcommands. Each returns an ExitCode and logs progress to `log`.

int cmd_gen(const ExperimentConfig& cfg, std::ostream& log);
int cmd_train(const ExperimentConfig& cfg, std::ostream& log);
int cmd_sweep(const ExperimentConfig& cfg, std::ostream& log);
int cmd_verify(const ExperimentConfig& cfg, std::ostream& log);
int cmd_analyze(const ExperimentConfig& cfg, const std::vector<std::string>& metrics_files,
                std::ostream& log);

}  // namespace dqnlab
