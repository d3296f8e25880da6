#include <iostream>

#include <CLI11.hpp>

#include "chag/cli/commands.hpp"

int main(int argc, char** argv) {
  chag::CliOptions opts;
  CLI::App app{"Channel-aggregation training simulator and cost model"};
  app.set_version_flag("--version", std::string(chag::kToolVersion));
  app.require_subcommand(1);

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opts.config_path, "key = value run configuration")->required();
    sub->add_option("--out", opts.out_dir, "output directory (default: CSV on stdout)");
    sub->add_option("--seed", opts.seed, "seed (falls back to the config, then CHAG_SEED, then 0)");
  };

  CLI::App* verify = app.add_subcommand("verify", "run a verification suite");
  verify->add_option("suite", opts.suite, "grad | equiv | comm | cost")
      ->required()
      ->check(CLI::IsMember({"grad", "equiv", "comm", "cost"}));
  common(verify);

  CLI::App* train = app.add_subcommand("train", "MAE training on synthetic data");
  common(train);
  train->add_option("--steps", opts.steps, "optimizer steps (overrides the config)");

  CLI::App* cost = app.add_subcommand("cost", "per-rank cost estimate as CSV");
  common(cost);
  cost->add_option("--budget", opts.budget, "bytes per GPU");

  CLI::App* plan = app.add_subcommand("plan", "fewest ranks that fit the budget");
  common(plan);
  plan->add_option("--budget", opts.budget, "bytes per GPU");

  CLI::App* sweep = app.add_subcommand("sweep", "cost estimates over channels or embed");
  common(sweep);
  sweep->add_option("--budget", opts.budget, "bytes per GPU");
  sweep->add_option("--axis", opts.axis, "channels | embed");
  sweep->add_option("--values", opts.values, "comma-separated values")->delimiter(',');

  CLI::App* dump = app.add_subcommand("ledger-dump", "collective ledger of one step as CSV");
  common(dump);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : chag::exit_code::bad_config;
  }
  opts.command = app.get_subcommands().front()->get_name();
  return chag::run_command(opts, std::cout, std::cerr);
}
