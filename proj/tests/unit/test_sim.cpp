#include <set>
#include <sstream>

#include "doctest.h"
#include "support/gradcheck.hpp"

#include "chag/sim/runtime.hpp"
#include "chag/tensor/ops.hpp"

using namespace chag;
using chag::testing::random_tensor;

namespace {

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_CASE("rank coordinates are a row-major bijection") {
  ParallelConfig pc{2, 3, 2};
  std::set<std::size_t> seen;
  for (std::size_t r = 0; r < pc.ranks(); ++r) {
    auto c = coords_of(r, pc);
    CHECK(rank_of(c, pc) == r);
    seen.insert(r);
  }
  CHECK(seen.size() == 12);
  CHECK(coords_of(1, pc).tp == 1);
  CHECK(coords_of(2, pc).fsdp == 1);
  CHECK(coords_of(6, pc).dp == 1);
  CHECK(group_ranks(7, Axis::tp, pc) == std::vector<std::size_t>{6, 7});
  CHECK(group_ranks(7, Axis::fsdp, pc) == std::vector<std::size_t>{7, 9, 11});
  CHECK(group_ranks(7, Axis::dp, pc) == std::vector<std::size_t>{1, 7});
  CHECK_THROWS_AS((ParallelConfig{0, 1, 1}.validate()), ConfigError);
}

TEST_CASE("single rank runs plainly with an empty ledger") {
  auto out = spawn_ranks<double>(ParallelConfig{}, [](RankContext&) {
    return sum(Tensor::full({3}, 2.0)).item();
  });
  CHECK(out.results == std::vector<double>{6.0});
  CHECK(out.ledger.empty());
  CHECK(out.ledger.query().events == 0);
  CHECK(out.ledger.query().bytes == 0);
}

TEST_CASE("size-1 group collectives are identities recorded with zero payload") {
  auto out = spawn_ranks<std::vector<double>>(ParallelConfig{}, [](RankContext& ctx) {
    Tensor x = Tensor::from_vector({2}, {1.5, -2.0});
    Tensor g = ctx.all_gather(Axis::tp, x, 0, "g");
    Tensor r = ctx.all_reduce(Axis::dp, g, "r");
    return values(r);
  });
  CHECK(out.results[0] == std::vector<double>{1.5, -2.0});
  REQUIRE(out.ledger.events().size() == 2);
  for (const auto& e : out.ledger.events()) CHECK(e.payload_bytes == 0);
}

TEST_CASE("all_gather concatenates by group index with ring payload") {
  auto out = spawn_ranks<Tensor>(ParallelConfig{2, 1, 1}, [](RankContext& ctx) {
    Tensor shard = Tensor::full({1, 16, 8}, double(ctx.rank()));
    return ctx.all_gather(Axis::tp, shard, 0, "act");
  });
  for (const auto& t : out.results) {
    CHECK(t.shape() == Shape{2, 16, 8});
    CHECK(t.at({0, 3, 3}) == 0.0);
    CHECK(t.at({1, 3, 3}) == 1.0);
  }
  auto q = out.ledger.query({.rank = 0});
  CHECK(q.events == 1);
  CHECK(q.bytes == 1024);
  CHECK(out.ledger.query().events == 2);
}

TEST_CASE("inner-axis all_gather") {
  auto out = spawn_ranks<Tensor>(ParallelConfig{3, 1, 1}, [](RankContext& ctx) {
    Tensor shard = Tensor::from_vector({2, 1}, {10.0 * ctx.rank(), 10.0 * ctx.rank() + 1});
    return ctx.all_gather(Axis::tp, shard, 1, "x");
  });
  CHECK(values(out.results[2]) == std::vector<double>{0, 10, 20, 1, 11, 21});
}

TEST_CASE("all_reduce, reduce_scatter and broadcast semantics") {
  auto out = spawn_ranks<std::vector<double>>(ParallelConfig{4, 1, 1}, [](RankContext& ctx) {
    std::vector<double> r = values(ctx.all_reduce(Axis::tp, Tensor::scalar(1.0), "one"));
    Tensor z = ctx.reduce_scatter(Axis::tp, Tensor::zeros({8, 2}), 0, "z");
    CHECK(z.shape() == Shape{2, 2});
    for (double v : z.data()) r.push_back(v);
    Tensor b = ctx.broadcast(Axis::tp, 2, Tensor::scalar(double(ctx.rank()) + 0.5), "b");
    r.push_back(b.item());
    return r;
  });
  for (const auto& r : out.results) {
    CHECK(r[0] == 4.0);
    for (std::size_t i = 1; i < 5; ++i) CHECK(r[i] == 0.0);
    CHECK(r[5] == 2.5);
  }
  // Ring broadcast from root 2: ranks 2, 3, 0 forward; rank 1 is last.
  std::vector<std::uint64_t> bytes(4);
  for (const auto& e : out.ledger.events())
    if (e.op == CollectiveOp::broadcast) bytes[e.rank] = e.payload_bytes;
  CHECK(bytes == std::vector<std::uint64_t>{8, 0, 8, 8});
  CHECK(ring_payload_bytes(CollectiveOp::all_reduce, 10, 4) == 8 * 15);
  CHECK(ring_payload_bytes(CollectiveOp::all_reduce, 3, 2) == 8 * 3);
  CHECK(ring_payload_bytes(CollectiveOp::reduce_scatter, 16, 4) == 8 * 4 * 3);
}

TEST_CASE("all_gather of reduce_scatter equals all_reduce") {
  for (std::size_t g : {2, 3, 4}) {
    auto out = spawn_ranks<double>(ParallelConfig{g, 1, 1}, [g](RankContext& ctx) {
      RngState rng(100 + ctx.rank());
      Tensor t = random_tensor({6 * g, 5}, rng, false);
      Tensor ar = ctx.all_reduce(Axis::tp, t, "ar");
      Tensor rs = ctx.reduce_scatter(Axis::tp, t, 0, "rs");
      Tensor ag = ctx.all_gather(Axis::tp, rs, 0, "ag");
      return chag::testing::max_rel_diff(ag.data(), ar.data());
    });
    for (double d : out.results) CHECK(d <= 1e-12);
  }
}

TEST_CASE("reduce_scatter divisibility is a protocol error") {
  CHECK_THROWS_AS(run_ranks(ParallelConfig{2, 1, 1},
                            [](RankContext& ctx) { ctx.reduce_scatter(Axis::tp, Tensor::zeros({3}), 0, "x"); }),
                  ProtocolError);
}

TEST_CASE("mismatched collectives name the divergent ranks") {
  try {
    run_ranks(ParallelConfig{2, 1, 1}, [](RankContext& ctx) {
      Tensor x = Tensor::zeros({2});
      if (ctx.rank() == 0)
        ctx.all_gather(Axis::tp, x, 0, "t");
      else
        ctx.all_reduce(Axis::tp, x, "t");
    });
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    std::string msg = e.what();
    CHECK(msg.find("rank 0") != std::string::npos);
    CHECK(msg.find("rank 1") != std::string::npos);
    CHECK(msg.find("AllGather") != std::string::npos);
    CHECK(msg.find("AllReduce") != std::string::npos);
  }
  CHECK_THROWS_AS(run_ranks(ParallelConfig{2, 1, 1},
                            [](RankContext& ctx) {
                              ctx.all_reduce(Axis::tp, Tensor::zeros({ctx.rank() + 1}), "shape");
                            }),
                  ProtocolError);
  CHECK_THROWS_AS(run_ranks(ParallelConfig{2, 1, 1},
                            [](RankContext& ctx) {
                              ctx.all_reduce(Axis::tp, Tensor::zeros({1}), ctx.rank() ? "a" : "b");
                            }),
                  ProtocolError);
}

TEST_CASE("a rank finishing while peers wait is a deadlock") {
  try {
    run_ranks(ParallelConfig{3, 1, 1}, [](RankContext& ctx) {
      if (ctx.rank() != 1) ctx.all_reduce(Axis::tp, Tensor::zeros({1}), "stuck");
    });
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()).find("deadlock") != std::string::npos);
  }
}

TEST_CASE("program errors propagate ahead of induced protocol errors") {
  CHECK_THROWS_WITH_AS(run_ranks(ParallelConfig{2, 1, 1},
                                 [](RankContext& ctx) {
                                   if (ctx.rank() == 1) throw ConfigError("bad rank program");
                                   ctx.all_reduce(Axis::tp, Tensor::zeros({1}), "x");
                                 }),
                       "bad rank program", ConfigError);
}

TEST_CASE("interleaved 8-rank program is scheduling independent") {
  ParallelConfig pc{2, 2, 2};
  auto program = [](RankContext& ctx) {
    RngState rng(ctx.rank());
    Tensor x = random_tensor({4, 3}, rng, false);
    for (int round = 0; round < 3; ++round) {
      x = ctx.all_gather(Axis::tp, slice(x, 0, 0, 2), 0, "tp.gather");
      x = add(x, ctx.all_reduce(Axis::fsdp, x, "fsdp.sum"));
      ctx.set_phase(Phase::backward);
      x = ctx.all_gather(Axis::dp, ctx.reduce_scatter(Axis::dp, x, 0, "dp.rs"), 0, "dp.ag");
      x = ctx.broadcast(Axis::tp, round % 2, scale(x, 0.5), "tp.bcast");
      ctx.set_phase(Phase::forward);
    }
    return values(x);
  };
  auto canonical = spawn_ranks<std::vector<double>>(pc, program);
  for (std::uint64_t seed : {1u, 99u}) {
    auto other = spawn_ranks<std::vector<double>>(pc, program, SchedulerOptions{seed});
    CHECK(other.results == canonical.results);
    CHECK(other.ledger.events() == canonical.ledger.events());
  }
  // One event per participating rank per call.
  CHECK(canonical.ledger.query().events == 8 * 3 * 5);
  CHECK(canonical.ledger.query({.phase = Phase::backward, .axis = Axis::dp}).events == 8 * 3 * 2);
}

TEST_CASE("ledger-only collectives and CSV export") {
  auto out = spawn_ranks<int>(ParallelConfig{1, 2, 1}, [](RankContext& ctx) {
    ctx.ledger_only(Axis::fsdp, CollectiveOp::all_gather, {4, 4}, "fsdp.unit0");
    ctx.set_phase(Phase::backward);
    ctx.ledger_only(Axis::fsdp, CollectiveOp::reduce_scatter, {8, 4}, "fsdp.unit0");
    return 0;
  });
  CHECK(out.ledger.query({.op = CollectiveOp::all_gather}).bytes == 2 * 16 * 8);
  CHECK(out.ledger.query({.op = CollectiveOp::reduce_scatter}).bytes == 2 * 16 * 8);
  CHECK(out.ledger.query({.tag_prefix = "fsdp."}).events == 4);
  std::ostringstream os;
  out.ledger.write_csv(os);
  std::string csv = os.str();
  CHECK(csv.starts_with("rank,seq,op,axis,phase,payload_bytes_per_rank,tag\n"));
  CHECK(csv.find("1,1,ReduceScatter,fsdp,backward,128,fsdp.unit0") != std::string::npos);
}

TEST_CASE("collective results are tracked on the receiving rank") {
  auto out = spawn_ranks<int>(ParallelConfig{2, 1, 1}, [](RankContext& ctx) {
    TagScope tag(tags::vit);
    Tensor g = ctx.all_gather(Axis::tp, Tensor::zeros({100}), 0, "x");
    return static_cast<int>(g.numel());
  });
  for (const auto& s : out.stats) CHECK(s.alloc.tag_peak(tags::vit) == 2 * 100 * 8 + 100 * 8);
}
