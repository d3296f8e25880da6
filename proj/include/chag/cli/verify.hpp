#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chag/cli/config_file.hpp"

namespace chag {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Central finite differences of the full MAE loss on `probes` sampled
/// parameters of the strategy's architecture (single process).
std::vector<CheckResult> verify_grad(const RunConfig& c, std::uint64_t seed, std::size_t probes = 25);
/// Loss and gradients of the distributed step against the single-process
/// reference of the same architecture.
std::vector<CheckResult> verify_equiv(const RunConfig& c, std::uint64_t seed);
/// Ledger structure of one step, and the cost model's prediction of it.
std::vector<CheckResult> verify_comm(const RunConfig& c, std::uint64_t seed);
/// Desk calibration, closed-form asymptotics and full-scale orderings.
std::vector<CheckResult> verify_cost();

/// Full-scale ordinal checks on the frozen cost model.
std::vector<CheckResult> full_scale_checks();

std::vector<CheckResult> run_suite(const std::string& suite, const RunConfig& c, std::uint64_t seed);

/// Fixed-width pass/fail table.
void print_checks(std::ostream& os, const std::vector<CheckResult>& checks);
bool all_pass(const std::vector<CheckResult>& checks);

}  // namespace chag
