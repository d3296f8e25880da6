#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "chag/cost/cost_model.hpp"

namespace chag {

/// Strategy family searched by the planner.
struct PlanRequest {
  ModelConfig model;
  StrategyKind kind = StrategyKind::tp_only;
  AggLayerKind layer_kind = AggLayerKind::linear;
  bool final_layer_tp_split = false;
  HardwareModel hw;
  std::size_t precision_bytes = 2;
  std::size_t batch = 1;
  std::size_t rank_limit = 1024;
};

struct PlanResult {
  bool feasible = false;
  StrategyConfig strategy;
  ParallelConfig parallel;
  CostReport report;
  std::size_t candidates = 0;  // configurations evaluated
};

/// Fewest ranks whose estimate fits the budget. Ranks run over powers of two;
/// at each count the grid is tp x fsdp with tp, fsdp and the tree max_group
/// powers of two. One rank also tries the serial model. Ties go to the
/// smallest forward payload, then to the first candidate enumerated.
PlanResult plan(const PlanRequest& req);

/// Every strategy candidate at exactly `ranks` ranks, in enumeration order.
std::vector<std::pair<StrategyConfig, ParallelConfig>> plan_candidates(const PlanRequest& req,
                                                                      std::size_t ranks);

enum class SweepAxis { channels, embed };
std::string_view to_string(SweepAxis a);
SweepAxis parse_sweep_axis(std::string_view s);

struct SweepStrategy {
  std::string label;
  StrategyConfig strategy;
  ParallelConfig parallel;
};

struct CostRow {
  std::string label;
  ModelConfig model;
  StrategyConfig strategy;
  ParallelConfig parallel;
  std::size_t batch = 1;
  CostReport report;
};

/// One row per (value, strategy), values outermost.
std::vector<CostRow> sweep(const ModelConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                           const std::vector<SweepStrategy>& strategies, const HardwareModel& hw,
                           std::size_t precision_bytes, std::size_t batch);

/// Header then one line per row; see README for the column order.
void write_cost_csv(std::ostream& os, const std::vector<CostRow>& rows);
std::vector<std::string> cost_csv_columns();

}  // namespace chag
