#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace chag {

enum class CollectiveOp { all_gather, reduce_scatter, all_reduce, broadcast };
enum class Axis { tp, fsdp, dp };
enum class Phase { forward, backward, optimizer };

std::string_view to_string(CollectiveOp op);
std::string_view to_string(Axis axis);
std::string_view to_string(Phase phase);

struct CommEvent {
  std::size_t rank = 0;
  std::size_t seq = 0;  // per-rank call order
  CollectiveOp op = CollectiveOp::all_gather;
  Axis axis = Axis::tp;
  Phase phase = Phase::forward;
  std::uint64_t payload_bytes = 0;  // bytes this rank transmits under a ring
  std::size_t group_size = 1;
  std::string tag;

  bool operator==(const CommEvent&) const = default;
};

struct LedgerFilter {
  std::optional<Phase> phase = {};
  std::optional<Axis> axis = {};
  std::optional<CollectiveOp> op = {};
  std::optional<std::size_t> rank = {};
  std::optional<std::string> tag_prefix = {};

  bool matches(const CommEvent& e) const;
};

struct LedgerTotals {
  std::uint64_t bytes = 0;
  std::size_t events = 0;
};

/// Ring-algorithm bytes one rank sends. `numel` is the rank's input element
/// count (for reduce_scatter, the full tensor); `position` is the rank's
/// distance from the root along the ring (broadcast only).
std::uint64_t ring_payload_bytes(CollectiveOp op, std::size_t numel, std::size_t group_size,
                                 std::size_t position = 0);

class CommLedger {
 public:
  void add(CommEvent e);
  /// Orders events by (rank, seq).
  void sort();

  const std::vector<CommEvent>& events() const { return events_; }
  bool empty() const { return events_.empty(); }
  LedgerTotals query(const LedgerFilter& filter = {}) const;

  /// CSV columns: rank,seq,op,axis,phase,payload_bytes_per_rank,tag
  void write_csv(std::ostream& os) const;

 private:
  std::vector<CommEvent> events_;
};

}  // namespace chag
