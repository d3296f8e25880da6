#include "chag/sim/runtime.hpp"

#include <condition_variable>
#include <exception>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "chag/tensor/rng.hpp"

namespace chag {

void ParallelConfig::validate() const {
  if (tp < 1 || fsdp < 1 || dp < 1)
    throw ConfigError("parallel group sizes must be >= 1 (tp=" + std::to_string(tp) +
                      ", fsdp=" + std::to_string(fsdp) + ", dp=" + std::to_string(dp) + ")");
}

RankCoords coords_of(std::size_t rank, const ParallelConfig& pc) {
  return {rank % pc.tp, (rank / pc.tp) % pc.fsdp, rank / (pc.tp * pc.fsdp)};
}

std::size_t rank_of(const RankCoords& c, const ParallelConfig& pc) {
  return (c.dp * pc.fsdp + c.fsdp) * pc.tp + c.tp;
}

std::vector<std::size_t> group_ranks(std::size_t rank, Axis axis, const ParallelConfig& pc) {
  RankCoords c = coords_of(rank, pc);
  std::vector<std::size_t> out;
  const std::size_t n = axis == Axis::tp ? pc.tp : axis == Axis::fsdp ? pc.fsdp : pc.dp;
  for (std::size_t i = 0; i < n; ++i) {
    RankCoords m = c;
    (axis == Axis::tp ? m.tp : axis == Axis::fsdp ? m.fsdp : m.dp) = i;
    out.push_back(rank_of(m, pc));
  }
  return out;
}

namespace detail {

namespace {

struct Signature {
  CollectiveOp op;
  Shape shape;
  std::size_t dim;
  std::size_t root;
  std::string tag;
};

std::string describe(const Signature& s) {
  std::ostringstream os;
  os << to_string(s.op) << "(tag '" << s.tag << "', shape " << shape_str(s.shape);
  if (s.op == CollectiveOp::all_gather || s.op == CollectiveOp::reduce_scatter) os << ", dim " << s.dim;
  if (s.op == CollectiveOp::broadcast) os << ", root " << s.root;
  os << ')';
  return os.str();
}

bool compatible(const Signature& a, const Signature& b) {
  if (a.op != b.op || a.tag != b.tag || a.dim != b.dim || a.root != b.root) return false;
  if (a.op != CollectiveOp::all_gather) return a.shape == b.shape;
  if (a.shape.size() != b.shape.size()) return false;
  for (std::size_t i = 0; i < a.shape.size(); ++i)
    if (i != a.dim && a.shape[i] != b.shape[i]) return false;
  return true;
}

struct Instance {
  std::vector<std::optional<Signature>> sigs;
  std::vector<std::shared_ptr<const std::vector<double>>> data;
  std::size_t arrived = 0;
  std::size_t departed = 0;
  std::string error;
  std::vector<std::size_t> waiting;
};

enum class Status { runnable, blocked, finished };

std::string rank_list(const std::vector<std::size_t>& ranks) {
  std::string s = "[";
  for (std::size_t i = 0; i < ranks.size(); ++i) s += (i ? "," : "") + std::to_string(ranks[i]);
  return s + "]";
}

}  // namespace

struct World {
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  ParallelConfig pc;
  std::optional<RngState> rng;
  std::mutex m;
  std::condition_variable cv;
  std::size_t active = kNone;
  std::vector<Status> status;
  std::vector<std::string> wake_error;
  std::vector<std::string> blocked_in;
  using GroupKey = std::pair<int, std::size_t>;
  std::map<GroupKey, std::map<std::size_t, Instance>> groups;
  std::vector<std::map<GroupKey, std::size_t>> calls;
  std::vector<std::vector<CommEvent>> events;

  explicit World(const ParallelConfig& p, const SchedulerOptions& opts)
      : pc(p),
        status(p.ranks(), Status::runnable),
        wake_error(p.ranks()),
        blocked_in(p.ranks()),
        calls(p.ranks()),
        events(p.ranks()) {
    if (opts.seed) rng.emplace(*opts.seed);
  }

  // Hands execution to the next runnable rank; callers hold `m`.
  void pass_baton(std::size_t from) {
    std::vector<std::size_t> runnable;
    auto collect = [&] {
      runnable.clear();
      for (std::size_t i = 1; i <= status.size(); ++i) {
        std::size_t r = (from + i) % status.size();
        if (status[r] == Status::runnable) runnable.push_back(r);
      }
    };
    collect();
    if (runnable.empty()) {
      std::vector<std::size_t> blocked, finished;
      for (std::size_t r = 0; r < status.size(); ++r)
        (status[r] == Status::blocked ? blocked : finished).push_back(r);
      if (blocked.empty()) {
        active = kNone;
        cv.notify_all();
        return;
      }
      for (std::size_t r : blocked) {
        wake_error[r] = "deadlock: rank " + std::to_string(r) + " waits in " + blocked_in[r] +
                        " while ranks " + rank_list(finished) + " have finished";
        status[r] = Status::runnable;
      }
      collect();
    }
    active = rng ? runnable[rng->below(runnable.size())] : runnable.front();
    cv.notify_all();
  }

  void wait_turn(std::unique_lock<std::mutex>& lock, std::size_t me) {
    cv.wait(lock, [&] { return active == me; });
  }
};

}  // namespace detail

RankContext::RankContext(detail::World& world, std::size_t rank)
    : world_(world),
      rank_(rank),
      coords_(coords_of(rank, world.pc)),
      tracker_(std::make_shared<ResourceTracker>()) {}

const ParallelConfig& RankContext::config() const { return world_.pc; }

std::size_t RankContext::group_size(Axis axis) const {
  return axis == Axis::tp ? world_.pc.tp : axis == Axis::fsdp ? world_.pc.fsdp : world_.pc.dp;
}

std::size_t RankContext::group_index(Axis axis) const {
  return axis == Axis::tp ? coords_.tp : axis == Axis::fsdp ? coords_.fsdp : coords_.dp;
}

std::vector<RankContext::Contribution> RankContext::exchange(Axis axis, CollectiveOp op,
                                                             const Tensor* t, const Shape& shape,
                                                             std::size_t dim, std::size_t root,
                                                             const std::string& tag) {
  using namespace detail;
  World& w = world_;
  const auto members = group_ranks(rank_, axis, w.pc);
  const std::size_t g = members.size(), idx = group_index(axis);
  detail::Signature sig{op, shape, dim, root, tag};
  auto values = t ? std::make_shared<const std::vector<double>>(t->data().begin(), t->data().end())
                  : std::shared_ptr<const std::vector<double>>();

  std::unique_lock lock(w.m);
  const World::GroupKey key{static_cast<int>(axis), members.front()};
  const std::size_t call = w.calls[rank_][key]++;
  Instance& inst = w.groups[key][call];
  if (inst.sigs.empty()) {
    inst.sigs.resize(g);
    inst.data.resize(g);
  }
  if (!inst.error.empty()) throw ProtocolError(inst.error);
  for (std::size_t j = 0; j < g; ++j) {
    if (!inst.sigs[j] || compatible(*inst.sigs[j], sig)) continue;
    inst.error = "protocol error in " + std::string(to_string(axis)) + " group " +
                 rank_list(members) + ": rank " + std::to_string(rank_) + " called " +
                 describe(sig) + " but rank " + std::to_string(members[j]) + " called " +
                 describe(*inst.sigs[j]);
    for (std::size_t r : inst.waiting) {
      w.wake_error[r] = inst.error;
      w.status[r] = Status::runnable;
    }
    throw ProtocolError(inst.error);
  }
  inst.sigs[idx] = sig;
  inst.data[idx] = values;
  if (++inst.arrived < g) {
    inst.waiting.push_back(rank_);
    w.status[rank_] = Status::blocked;
    w.blocked_in[rank_] = describe(sig) + " on " + std::string(to_string(axis)) + " group " +
                          rank_list(members);
    w.pass_baton(rank_);
    w.wait_turn(lock, rank_);
    if (!w.wake_error[rank_].empty()) throw ProtocolError(w.wake_error[rank_]);
  } else {
    for (std::size_t r : inst.waiting) w.status[r] = Status::runnable;
    inst.waiting.clear();
  }

  std::vector<Contribution> out;
  for (std::size_t j = 0; j < g; ++j) out.push_back({inst.sigs[j]->shape, inst.data[j]});
  if (++inst.departed == g) w.groups[key].erase(call);

  CommEvent e;
  e.rank = rank_;
  e.seq = w.events[rank_].size();
  e.op = op;
  e.axis = axis;
  e.phase = phase_;
  e.group_size = g;
  e.tag = tag;
  e.payload_bytes = ring_payload_bytes(op, shape_numel(shape), g, (idx + g - root) % g);
  w.events[rank_].push_back(std::move(e));
  return out;
}

Tensor RankContext::all_gather(Axis axis, const Tensor& shard, std::size_t dim,
                               const std::string& tag) {
  if (dim >= shard.dim()) throw ProtocolError("all_gather: dim out of range for " + shape_str(shard.shape()));
  auto parts = exchange(axis, CollectiveOp::all_gather, &shard, shard.shape(), dim, 0, tag);
  Shape out_shape = shard.shape();
  out_shape[dim] = 0;
  for (const auto& p : parts) out_shape[dim] += p.shape[dim];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= out_shape[i];
  std::vector<double> out;
  out.reserve(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t block = p.values->size() / outer;
      out.insert(out.end(), p.values->begin() + o * block, p.values->begin() + (o + 1) * block);
    }
  }
  return Tensor::from_vector(out_shape, std::move(out));
}

Tensor RankContext::reduce_scatter(Axis axis, const Tensor& full, std::size_t dim,
                                   const std::string& tag) {
  const std::size_t g = group_size(axis);
  if (dim >= full.dim() || full.size(dim) % g != 0)
    throw ProtocolError("reduce_scatter: " + shape_str(full.shape()) + " dim " + std::to_string(dim) +
                        " not divisible by group size " + std::to_string(g));
  auto parts = exchange(axis, CollectiveOp::reduce_scatter, &full, full.shape(), dim, 0, tag);
  std::vector<double> sum(*parts[0].values);
  for (std::size_t j = 1; j < parts.size(); ++j)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*parts[j].values)[i];
  Shape out_shape = full.shape();
  out_shape[dim] /= g;
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < dim; ++i) outer *= out_shape[i];
  for (std::size_t i = dim + 1; i < out_shape.size(); ++i) inner *= out_shape[i];
  const std::size_t chunk = out_shape[dim] * inner, row = chunk * g, mine = group_index(axis);
  std::vector<double> out;
  out.reserve(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o)
    out.insert(out.end(), sum.begin() + o * row + mine * chunk, sum.begin() + o * row + (mine + 1) * chunk);
  return Tensor::from_vector(out_shape, std::move(out));
}

Tensor RankContext::all_reduce(Axis axis, const Tensor& t, const std::string& tag) {
  auto parts = exchange(axis, CollectiveOp::all_reduce, &t, t.shape(), 0, 0, tag);
  std::vector<double> sum(*parts[0].values);
  for (std::size_t j = 1; j < parts.size(); ++j)
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += (*parts[j].values)[i];
  return Tensor::from_vector(t.shape(), std::move(sum));
}

Tensor RankContext::broadcast(Axis axis, std::size_t root, const Tensor& t, const std::string& tag) {
  if (root >= group_size(axis)) throw ProtocolError("broadcast: root index out of range");
  auto parts = exchange(axis, CollectiveOp::broadcast, &t, t.shape(), 0, root, tag);
  return Tensor::from_vector(t.shape(), *parts[root].values);
}

void RankContext::ledger_only(Axis axis, CollectiveOp op, const Shape& shape, const std::string& tag) {
  exchange(axis, op, nullptr, shape, 0, 0, tag);
}

RunRecord run_ranks(const ParallelConfig& pc, const std::function<void(RankContext&)>& program,
                    const SchedulerOptions& opts) {
  pc.validate();
  const std::size_t R = pc.ranks();
  detail::World world(pc, opts);
  std::vector<std::unique_ptr<RankContext>> contexts;
  for (std::size_t r = 0; r < R; ++r) contexts.push_back(std::make_unique<RankContext>(world, r));
  std::vector<std::exception_ptr> errors(R);
  std::vector<ResourceStats> stats(R);

  {
    std::lock_guard lock(world.m);
    world.pass_baton(R - 1);
  }
  std::vector<std::thread> threads;
  for (std::size_t r = 0; r < R; ++r) {
    threads.emplace_back([&, r] {
      RankContext& ctx = *contexts[r];
      {
        std::unique_lock lock(world.m);
        world.wait_turn(lock, r);
      }
      {
        TrackerScope scope(ctx.tracker_);
        try {
          program(ctx);
        } catch (...) {
          errors[r] = std::current_exception();
        }
        stats[r] = snapshot(*ctx.tracker_);
      }
      std::lock_guard lock(world.m);
      world.status[r] = detail::Status::finished;
      world.pass_baton(r);
    });
  }
  for (auto& t : threads) t.join();

  std::exception_ptr protocol;
  for (auto& e : errors) {
    if (!e) continue;
    try {
      std::rethrow_exception(e);
    } catch (const ProtocolError&) {
      if (!protocol) protocol = e;
    } catch (...) {
      throw;
    }
  }
  if (protocol) std::rethrow_exception(protocol);

  RunRecord rec;
  for (auto& evs : world.events)
    for (auto& e : evs) rec.ledger.add(std::move(e));
  rec.stats = std::move(stats);
  return rec;
}

}  // namespace chag
