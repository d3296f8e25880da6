#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "chag/cli/config_file.hpp"
#include "chag/model/params.hpp"
#include "chag/sim/ledger.hpp"
#include "chag/tensor/resources.hpp"

namespace chag {

inline constexpr const char* kToolVersion = "0.1.0";

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failed = 1;      // a check failed or nothing fits
inline constexpr int bad_config = 2;  // unreadable or invalid configuration
}  // namespace exit_code

struct CliOptions {
  std::string command;  // verify | train | cost | plan | sweep | ledger-dump
  std::string suite;    // verify: grad | equiv | comm | cost
  std::string config_path;
  std::string out_dir;  // empty: CSV goes to stdout, nothing written
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> budget;
  std::optional<std::string> axis;
  std::vector<std::size_t> values;
};

/// --seed, then the config's seed, then $CHAG_SEED, then 0.
std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const RunConfig& c);

struct TrainResult {
  std::vector<double> losses;  // mean over replicas, one per step
  CommLedger first_step_ledger;
  ResourceStats first_step_stats;  // rank 0
  ParamStore params;
};

/// MAE training on synthetic data under the configured strategy with Adam on
/// the master parameters.
TrainResult train_model(const RunConfig& c, std::uint64_t seed, std::size_t steps);

void write_loss_csv(std::ostream& os, const std::vector<double>& losses);

/// Writes `text` to `path` through a temporary file and a rename.
void write_file_atomic(const std::string& path, const std::string& text);

/// Dispatches a parsed command line; returns the process exit code.
int run_command(const CliOptions& opts, std::ostream& out, std::ostream& err);

}  // namespace chag
