#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string_view>

#include "chag/model/config.hpp"
#include "chag/parallel/sharding.hpp"
#include "chag/sim/ledger.hpp"
#include "chag/sim/runtime.hpp"

namespace chag {

enum class Component { tokenize, aggregate, vit, decoder };
inline constexpr std::array<Component, 4> kComponents = {Component::tokenize, Component::aggregate,
                                                         Component::vit, Component::decoder};
std::string_view to_string(Component c);

struct HardwareModel {
  std::uint64_t bytes_per_gpu = 64ULL << 30;
  std::size_t gpus_per_node = 8;

  void validate() const;
};

/// Per-rank memory (bytes) and per-step FLOPs of one component.
struct ComponentCost {
  double params_bytes = 0.0;
  double activation_bytes = 0.0;
  double grad_bytes = 0.0;
  double optimizer_bytes = 0.0;
  double forward_flops = 0.0;
  double flops = 0.0;  // forward + backward (2x forward)

  double memory_bytes() const { return params_bytes + activation_bytes + grad_bytes + optimizer_bytes; }
  ComponentCost& operator+=(const ComponentCost& o);
};

/// Collective traffic of one rank for one (phase, axis) cell.
struct CommCell {
  std::uint64_t bytes = 0;
  std::size_t events = 0;
};

struct CostReport {
  std::array<ComponentCost, 4> components{};
  ComponentCost totals;
  // [phase][axis], indexed by Phase and Axis.
  std::array<std::array<CommCell, 3>, 3> comm{};
  std::size_t ranks = 1;
  std::uint64_t budget_bytes = 0;
  bool fits = false;

  const ComponentCost& operator[](Component c) const { return components[static_cast<std::size_t>(c)]; }
  const CommCell& comm_at(Phase p, Axis a) const {
    return comm[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)];
  }
  double memory_bytes() const { return totals.memory_bytes(); }
  /// Memory of tokenize + aggregate.
  double channel_stage_bytes() const;
  std::uint64_t forward_comm_bytes() const;
};

/// Per-rank element counts, before precision and calibration.
struct ComponentCounts {
  double params = 0.0;       // local parameters (after TP split, before FSDP)
  double stored = 0.0;   // kept for backward, including collective outputs
  double working = 0.0;  // largest set of gradient buffers alive at once in backward
  double activations = 0.0;  // stored + working
  double forward_flops = 0.0;
};

/// Exact engine counts for TP rank 0 of `s` with a per-replica batch.
std::array<ComponentCounts, 4> component_counts(const ModelConfig& m, const StrategyConfig& s,
                                                std::size_t batch);

/// Local parameter count of every FSDP/DP synchronisation group, in the
/// order the engine first touches them.
std::vector<std::pair<std::string, double>> group_param_counts(const ModelConfig& m,
                                                               const StrategyConfig& s);

/// Multipliers from stored-for-backward activations to the allocator's
/// per-tag peak, fit on desk-scale runs and frozen.
const std::array<double, 4>& activation_calibration();

CostReport estimate(const ModelConfig& m, const StrategyConfig& s, const ParallelConfig& pc,
                    const HardwareModel& hw = {}, std::size_t precision_bytes = 8,
                    std::size_t batch = 1);

}  // namespace chag
