// peopl: batch experiment runner.
//
//   peopl [flags] run <config>
//   peopl [flags] score|compose|encode|train <config>
//   peopl [flags] attack mmd|sensitive|match <config>
//   peopl validate <config>
//
// Exit codes: 0 ok, 2 config or input error, 3 budget exceeded, 4 numeric
// divergence, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "peopl/error.hpp"
#include "peopl/harness.hpp"

namespace {

int fail(int code, const std::string& message) {
  std::cerr << "peopl: error: " << message << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Privacy scoring, randomized encoders and attacks, driven by JSON configs."};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", peopl::kToolVersion);

  std::optional<std::uint64_t> seed, budget;
  std::optional<std::string> out;
  std::optional<int> workers;
  bool force = false;
  app.add_option("--seed", seed, "Master seed (overrides the config)");
  app.add_option("--out", out, "Output directory (overrides output_dir)");
  app.add_option("--workers", workers, "Worker threads; results do not depend on it")
      ->check(CLI::PositiveNumber);
  app.add_option("--budget", budget, "Enumeration budget for exact scores")
      ->check(CLI::PositiveNumber);
  app.add_flag("--force", force, "Reuse an output directory that already holds a run");

  std::string config_path, attack_type;
  struct Command {
    const char* name;
    const char* help;
    const char* kind;  // expected config kind, nullptr for any
  };
  const Command commands[] = {
      {"run", "Run any config", nullptr},
      {"score", "Exact privacy and utility scores", "score"},
      {"compose", "Random composition sweep", "compose_sweep"},
      {"encode", "Encode a dataset with a freshly drawn key", "encode"},
      {"train", "Downstream training settings", "train"},
      {"validate", "Check a config without running it", nullptr},
  };
  std::string chosen_kind;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("config", config_path, "Config file")->required();
    sub->callback([&chosen_kind, c] { chosen_kind = c.kind ? c.kind : ""; });
  }
  CLI::App* attack = app.add_subcommand("attack", "Attacks on randomized encoders");
  attack->add_option("type", attack_type, "mmd, sensitive or match")
      ->required()
      ->check(CLI::IsMember({"mmd", "sensitive", "match"}));
  attack->add_option("config", config_path, "Config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  peopl::RunOptions options;
  options.seed = seed;
  options.out = out;
  options.workers = workers;
  options.budget = budget;
  options.force = force;
  options.base_dir = std::filesystem::path(config_path).parent_path().string();
  if (options.base_dir.empty()) options.base_dir = ".";
  if (!chosen_kind.empty()) options.expected_kind = chosen_kind;
  if (attack->parsed()) {
    options.expected_kind = "attack";
    options.attack_type = attack_type;
  }

  try {
    const nlohmann::json config = peopl::load_config(config_path);
    if (app.got_subcommand("validate")) {
      peopl::validate_config(config, options);
      std::cout << config_path << ": ok\n";
      return 0;
    }
    const peopl::RunResult result = peopl::run_experiment(config, options);
    std::cout << "wrote " << result.report.at("rows").size() << " rows to " << result.out_dir
              << "\n";
    return 0;
  } catch (const peopl::BudgetExceeded& e) {
    return fail(3, e.what());
  } catch (const peopl::Divergence& e) {
    return fail(4, e.what());
  } catch (const peopl::InvalidArgument& e) {
    return fail(2, e.what());
  } catch (const peopl::ImpossibleObservation& e) {
    return fail(2, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(2, std::string("config: ") + e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
}
