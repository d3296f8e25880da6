#pragma once

#include <vector>

#include "chag/model/model.hpp"
#include "chag/parallel/sharding.hpp"
#include "chag/sim/runtime.hpp"

namespace chag {

struct StepOutput {
  double loss = 0.0;               // global rank 0
  std::vector<double> rank_loss;   // by global rank
  GradMap grads;                   // master layout, from the first TP group
  std::vector<ParamStore> rank_params;  // local parameters with gradients
  CommLedger ledger;
  std::vector<ResourceStats> stats;
};

/// One forward/backward step of `s` on the grid `pc`. `batches` holds one
/// batch per (dp, fsdp) replica, ordered by dp * fsdp + fsdp_index. With more
/// than one replica the gradients are averaged over replicas: an FSDP
/// ReduceScatter, a DP AllReduce per parameter group, then an FSDP AllGather
/// in the optimizer phase.
StepOutput run_step(const StrategyConfig& s, const ParallelConfig& pc, const ModelConfig& m,
                    const ParamStore& master, const std::vector<Batch>& batches,
                    const SchedulerOptions& opts = {});

/// Reference step on one process for any architecture (flat or D-CHAG).
StepOutput run_serial_step(const Architecture& arch, const ParamStore& master, const Batch& batch);
StepOutput run_tp_step(const ParallelConfig& pc, const ModelConfig& m, const ParamStore& master,
                       const Batch& batch, const SchedulerOptions& opts = {});
StepOutput run_dist_token_step(const ParallelConfig& pc, const ModelConfig& m,
                               const ParamStore& master, const Batch& batch,
                               const SchedulerOptions& opts = {});
StepOutput run_dchag_step(const ParallelConfig& pc, const StrategyConfig& s, const ModelConfig& m,
                          const ParamStore& master, const Batch& batch,
                          const SchedulerOptions& opts = {});
StepOutput run_hybrid_step(const ParallelConfig& pc, const StrategyConfig& s, const ModelConfig& m,
                           const ParamStore& master, const std::vector<Batch>& batches,
                           const SchedulerOptions& opts = {});

/// Largest relative difference (inf-norm per tensor) between two gradient
/// sets over the names of `reference`. Denominators are floored at 1e-4 of
/// the largest reference entry, so tensors whose gradient is zero up to
/// round-off (attention key biases) compare on the global scale.
double max_grad_rel_diff(const GradMap& a, const GradMap& reference);

}  // namespace chag
