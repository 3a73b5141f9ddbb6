#pragma once

// Config-driven experiment runner behind the `peopl` command-line tool.
//
// A config is a JSON object with schema_version 1, a kind (score,
// compose_sweep, encode, attack, train, full_pipeline) and a body under the
// key named after the kind. Unknown fields are errors. Every run writes, in
// this order:
//   manifest.json  config hash, tool version, per-stage seeds, input digests
//   report.json    full results
//   summary.csv    one flat row per configuration and seed
// plus kind-specific artifacts. Results never depend on the worker count.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "peopl/families.hpp"
#include "peopl/scores.hpp"

namespace peopl {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";

struct RunOptions {
  std::optional<std::uint64_t> seed;  // overrides the config's master seed
  std::optional<std::string> out;     // overrides output_dir
  std::optional<int> workers;
  std::optional<std::uint64_t> budget;
  // Kind the subcommand expects; the config's kind must agree when present.
  std::optional<std::string> expected_kind;
  // Attack type forced by `attack mmd|sensitive|match`.
  std::optional<std::string> attack_type;
  bool force = false;  // allow reusing an output directory that holds a run
  // Base for relative paths inside the config.
  std::string base_dir = ".";
};

struct RunResult {
  std::string out_dir;
  nlohmann::json report;
  std::string summary_csv;
};

// Reads a config file; relative paths inside it resolve against its directory
// unless options.base_dir is set explicitly by the caller.
nlohmann::json load_config(const std::string& path);

// Full structural validation without running anything. Throws InvalidArgument
// naming the offending field.
void validate_config(const nlohmann::json& config, const RunOptions& options = {});

// Validates, writes the manifest, runs, writes the reports. Library errors
// propagate (InvalidArgument, BudgetExceeded, Divergence, ...).
RunResult run_experiment(const nlohmann::json& config, const RunOptions& options);

// Random family pairs for the composition sweep. A trial draws a universe of
// 2..max_universe scalar samples with random labels, an owner dataset size n
// from n_values (capped at the universe size) and two families of random
// distinct permutations with random positive weights.
struct ComposeSweepSpec {
  std::size_t trials = 100;
  std::size_t max_universe = 6;
  std::size_t max_family = 8;
  std::size_t labels = 2;
  std::vector<std::size_t> n_values{1, 2};
};

struct ComposeTrial {
  Universe universe;
  std::size_t n = 0;
  EncoderFamily inner, outer, composite;  // composite = outer o inner
  double inner_bits = 0.0, outer_bits = 0.0, composite_bits = 0.0;
};

ComposeTrial run_compose_trial(const ComposeSweepSpec& spec, std::uint64_t seed,
                               const ScoreOptions& options = {});

// Stage names whose seeds a kind derives from the master seed.
std::vector<std::string> stage_names(const std::string& kind);

}  // namespace peopl
