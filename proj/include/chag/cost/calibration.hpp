#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "chag/cost/cost_model.hpp"

namespace chag {

/// One desk-scale configuration run through the engine to compare the
/// estimator against the allocator.
struct CalibrationCase {
  std::string name;
  ModelConfig model;
  StrategyConfig strategy;
  std::size_t batch = 1;
};

struct CalibrationPoint {
  CalibrationCase config;
  std::array<double, 4> predicted{};  // activation bytes per component
  std::array<double, 4> measured{};   // allocator per-tag peak of rank 0
  std::array<double, 4> predicted_flops{};
  std::array<double, 4> measured_flops{};
  CostReport report;
  CommLedger ledger;

  /// Largest |predicted / measured - 1| over components.
  double worst_activation_error() const;
};

/// The twelve configurations the activation factors were fit on.
std::vector<CalibrationCase> desk_calibration_cases();

/// Runs one training step of `c` under its strategy (tp ranks, one replica).
CalibrationPoint calibrate(const CalibrationCase& c, std::uint64_t seed = 1);

/// Least-squares a + b*x + c*x^2.
struct QuadraticFit {
  double a = 0.0, b = 0.0, c = 0.0;

  double operator()(double x) const { return a + b * x + c * x * x; }
  /// Fraction of the fitted value at x contributed by the x^2 term.
  double quadratic_share(double x) const { return c * x * x / (*this)(x); }
};

QuadraticFit fit_quadratic(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace chag
