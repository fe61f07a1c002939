#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "qfd/diffusion_policy.hpp"
#include "qfd/envs.hpp"
#include "qfd/langevin.hpp"
#include "qfd/trainer.hpp"

namespace qfd {

/// Bad config file, bad key, bad value. Maps to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Command-line values that win over the config file.
struct ConfigOverrides {
  std::optional<std::string> env;
  std::optional<std::uint64_t> seed;
  std::optional<long> steps;
  std::optional<int> diffusion_steps;
  std::optional<double> eta;
  bool no_field_loss = false;
  bool no_time_weight = false;
  bool distributional = false;
};

/// Parses JSON text into a config; absent keys keep their defaults. `source`
/// names the input in error messages.
RunConfig parse_config_text(const std::string& text, const std::string& source = "config");

void apply_overrides(RunConfig& config, const ConfigOverrides& overrides);

/// File (optional) + overrides, validated. Every failure is a ConfigError.
RunConfig parse_config(const std::optional<std::filesystem::path>& path, const ConfigOverrides& overrides = {});

// ---------------------------------------------------------------------------
// Learning curves

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

/// Per-step mean over runs and the 95% band mean +- 1.96 std / sqrt(n)
/// (sample std). Only steps present in every run are kept.
struct CurveSummary {
  std::vector<long> steps;
  std::vector<double> mean;
  std::vector<double> lower;
  std::vector<double> upper;
  std::size_t runs = 0;
  bool has_band() const { return runs > 1; }
};

CurveSummary summarize_curves(const std::vector<std::vector<MetricsRow>>& runs);

std::string curves_svg(const CurveSummary& summary, const std::string& title);

/// Reads every metrics file and renders TAR against step. Throws if any file
/// holds no rows.
std::string plot_curves(const std::vector<std::filesystem::path>& metrics_paths, const std::string& title = "TAR");

// ---------------------------------------------------------------------------
// Multigoal report

struct MultigoalReport {
  ModeCoverage coverage;
  EvalResult rollouts;
  std::string svg;
  std::string json;
};

/// Rolls out `n_traj` noise-free episodes and summarises mode coverage.
MultigoalReport multigoal_report(const DiffusionPolicy& policy, const ParamStore& params, int num_goals, int n_traj,
                                 std::uint64_t seed);

/// Rebuilds the policy described by `config` from a checkpoint.
DiffusionPolicy policy_from_checkpoint(const RunConfig& config, const Checkpoint& ckpt);

MultigoalReport multigoal_report(const std::filesystem::path& checkpoint, const RunConfig& config, int num_goals,
                                 int n_traj, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Langevin demo

struct LangevinDemo {
  Histogram1D hist;
  Vec reference;
  double tv = 0.0;
  std::string csv;
  std::string svg;
};

/// Samples a 1-D energy with Langevin chains and compares the histogram to
/// the quadrature density on [-2, 2].
LangevinDemo langevin_demo(const std::string& energy, int n_samples, double alpha, std::uint64_t seed,
                           int bins = 40);

}  // namespace qfd
