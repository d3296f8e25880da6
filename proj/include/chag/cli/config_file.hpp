#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chag/cost/planner.hpp"
#include "chag/model/config.hpp"
#include "chag/parallel/sharding.hpp"
#include "chag/sim/runtime.hpp"

namespace chag {

/// Everything a command needs, read from a flat `key = value` file.
struct RunConfig {
  ModelConfig model;
  StrategyConfig strategy;
  ParallelConfig parallel;
  HardwareModel hw;
  std::size_t batch = 2;            // per replica
  std::size_t precision_bytes = 8;  // cost commands only
  std::size_t rank_limit = 1024;
  std::optional<std::uint64_t> seed;
  std::size_t steps = 1;
  double lr = 3e-3;
  SweepAxis sweep_axis = SweepAxis::channels;
  std::vector<std::size_t> sweep_values;
  std::vector<std::string> sweep_strategies = {"tp_only", "dchag-L"};

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

/// Recognised keys in the order they are written back.
const std::vector<std::string>& config_keys();

/// Parses `key = value` lines; `#` starts a comment. Throws ConfigError with
/// the line number on malformed input, unknown keys or duplicates.
std::map<std::string, std::string> parse_config_text(std::string_view text);

/// `preset` (if present) is applied first, then every other key.
RunConfig run_config_from(const std::map<std::string, std::string>& kv);
RunConfig load_run_config(const std::string& path);

/// Round-trips through run_config_from.
std::string to_config_text(const RunConfig& c);

/// Named strategy for sweeps: serial, tp_only, dist_token, dchag-L, dchag-C.
StrategyConfig named_strategy(std::string_view label, const StrategyConfig& base);

}  // namespace chag
