#include "chag/sim/ledger.hpp"

#include <algorithm>

namespace chag {

std::string_view to_string(CollectiveOp op) {
  switch (op) {
    case CollectiveOp::all_gather: return "AllGather";
    case CollectiveOp::reduce_scatter: return "ReduceScatter";
    case CollectiveOp::all_reduce: return "AllReduce";
    case CollectiveOp::broadcast: return "Broadcast";
  }
  return "?";
}

std::string_view to_string(Axis axis) {
  switch (axis) {
    case Axis::tp: return "tp";
    case Axis::fsdp: return "fsdp";
    case Axis::dp: return "dp";
  }
  return "?";
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::forward: return "forward";
    case Phase::backward: return "backward";
    case Phase::optimizer: return "optimizer";
  }
  return "?";
}

bool LedgerFilter::matches(const CommEvent& e) const {
  if (phase && e.phase != *phase) return false;
  if (axis && e.axis != *axis) return false;
  if (op && e.op != *op) return false;
  if (rank && e.rank != *rank) return false;
  if (tag_prefix && !e.tag.starts_with(*tag_prefix)) return false;
  return true;
}

std::uint64_t ring_payload_bytes(CollectiveOp op, std::size_t numel, std::size_t g,
                                 std::size_t position) {
  constexpr std::uint64_t kElem = sizeof(double);
  if (g <= 1) return 0;
  switch (op) {
    case CollectiveOp::all_gather:
      return kElem * numel * (g - 1);
    case CollectiveOp::reduce_scatter:
      return kElem * (numel / g) * (g - 1);
    case CollectiveOp::all_reduce:
      // ReduceScatter then AllGather: 2 (g-1)/g of the tensor, whole elements.
      return kElem * ((2 * numel * (g - 1) + g - 1) / g);
    case CollectiveOp::broadcast:
      // Pipelined ring: every rank forwards the tensor except the last one.
      return position + 1 < g ? kElem * numel : 0;
  }
  return 0;
}

void CommLedger::add(CommEvent e) { events_.push_back(std::move(e)); }

void CommLedger::sort() {
  std::stable_sort(events_.begin(), events_.end(), [](const CommEvent& a, const CommEvent& b) {
    return a.rank != b.rank ? a.rank < b.rank : a.seq < b.seq;
  });
}

LedgerTotals CommLedger::query(const LedgerFilter& filter) const {
  LedgerTotals t;
  for (const auto& e : events_) {
    if (!filter.matches(e)) continue;
    t.bytes += e.payload_bytes;
    ++t.events;
  }
  return t;
}

void CommLedger::write_csv(std::ostream& os) const {
  os << "rank,seq,op,axis,phase,payload_bytes_per_rank,tag\n";
  for (const auto& e : events_)
    os << e.rank << ',' << e.seq << ',' << to_string(e.op) << ',' << to_string(e.axis) << ','
       << to_string(e.phase) << ',' << e.payload_bytes << ',' << e.tag << '\n';
}

}  // namespace chag
