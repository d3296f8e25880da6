#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chag/sim/ledger.hpp"
#include "chag/tensor/resources.hpp"
#include "chag/tensor/tensor.hpp"

namespace chag {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ParallelConfig {
  std::size_t tp = 1;
  std::size_t fsdp = 1;
  std::size_t dp = 1;

  std::size_t ranks() const { return tp * fsdp * dp; }
  void validate() const;
};

struct RankCoords {
  std::size_t tp = 0;
  std::size_t fsdp = 0;
  std::size_t dp = 0;
};

/// Row-major over (dp, fsdp, tp): tp is the fastest-varying coordinate.
RankCoords coords_of(std::size_t rank, const ParallelConfig& pc);
std::size_t rank_of(const RankCoords& c, const ParallelConfig& pc);
/// Global ranks of the `axis` group containing `rank`, by group index.
std::vector<std::size_t> group_ranks(std::size_t rank, Axis axis, const ParallelConfig& pc);

namespace detail {
struct World;
}

struct SchedulerOptions;
struct RunRecord;

/// Handle a rank program uses to query its position and call collectives.
/// Collectives block until every member of the group has entered the same
/// call; results are combined in group-index order.
class RankContext {
 public:
  RankContext(detail::World& world, std::size_t rank);

  std::size_t rank() const { return rank_; }
  const RankCoords& coords() const { return coords_; }
  const ParallelConfig& config() const;
  std::size_t group_size(Axis axis) const;
  std::size_t group_index(Axis axis) const;

  Phase phase() const { return phase_; }
  void set_phase(Phase p) { phase_ = p; }

  /// Concatenation along `dim` of every member's `shard`.
  Tensor all_gather(Axis axis, const Tensor& shard, std::size_t dim, const std::string& tag);
  /// Elementwise sum over the group, then this member's slice along `dim`.
  Tensor reduce_scatter(Axis axis, const Tensor& full, std::size_t dim, const std::string& tag);
  Tensor all_reduce(Axis axis, const Tensor& t, const std::string& tag);
  Tensor broadcast(Axis axis, std::size_t root_index, const Tensor& t, const std::string& tag);
  /// Synchronises and records a collective on a tensor of `shape` per member
  /// without moving data.
  void ledger_only(Axis axis, CollectiveOp op, const Shape& shape, const std::string& tag);

  const ResourceTracker& tracker() const { return *tracker_; }

 private:
  friend struct detail::World;
  friend RunRecord run_ranks(const ParallelConfig&, const std::function<void(RankContext&)>&,
                             const SchedulerOptions&);
  struct Contribution {
    Shape shape;
    std::shared_ptr<const std::vector<double>> values;
  };
  std::vector<Contribution> exchange(Axis axis, CollectiveOp op, const Tensor* t,
                                     const Shape& shape, std::size_t dim, std::size_t root,
                                     const std::string& tag);

  detail::World& world_;
  std::size_t rank_;
  RankCoords coords_;
  Phase phase_ = Phase::forward;
  std::shared_ptr<ResourceTracker> tracker_;
};

struct SchedulerOptions {
  // Unset: round-robin in rank order. Set: the next rank to run is drawn
  // from the runnable set with this seed.
  std::optional<std::uint64_t> seed;
};

struct RunRecord {
  CommLedger ledger;
  std::vector<ResourceStats> stats;
};

/// Runs one program per rank to completion. Exceptions from a program are
/// rethrown (lowest failing rank first, program errors before protocol errors).
RunRecord run_ranks(const ParallelConfig& pc, const std::function<void(RankContext&)>& program,
                    const SchedulerOptions& opts = {});

template <class T>
struct SpawnResult {
  std::vector<T> results;
  CommLedger ledger;
  std::vector<ResourceStats> stats;
};

template <class T>
SpawnResult<T> spawn_ranks(const ParallelConfig& pc, const std::function<T(RankContext&)>& program,
                           const SchedulerOptions& opts = {}) {
  std::vector<std::optional<T>> slots(pc.ranks());
  RunRecord rec = run_ranks(
      pc, [&](RankContext& ctx) { slots[ctx.rank()].emplace(program(ctx)); }, opts);
  SpawnResult<T> out;
  for (auto& s : slots) out.results.push_back(std::move(*s));
  out.ledger = std::move(rec.ledger);
  out.stats = std::move(rec.stats);
  return out;
}

}  // namespace chag
