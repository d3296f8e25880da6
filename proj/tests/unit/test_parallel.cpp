#include <cmath>
#include <iomanip>
#include <sstream>

#include "doctest.h"
#include "support/model_fixtures.hpp"

#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"
#include "chag/parallel/weights_io.hpp"

using namespace chag;
using chag::testing::randomize;
using chag::testing::tiny_config;

namespace {

ModelConfig matrix_config(std::size_t channels, AggVariant v = AggVariant::full_cross) {
  ModelConfig m = tiny_config();
  m.channels = channels;
  m.embed = 8;
  m.heads = 4;
  m.depth = 2;
  m.decoder_dim = 4;
  m.agg_variant = v;
  return m;
}

ParamStore master_for(const Architecture& arch, std::uint64_t seed) {
  auto p = init_parameters(arch, seed);
  randomize(p, seed + 1, 0.3);
  return p;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

StrategyConfig dchag(std::size_t tp, AggLayerKind kind, std::size_t max_group = 0, bool split = false) {
  StrategyConfig s;
  s.kind = StrategyKind::dchag;
  s.tp = tp;
  s.agg_layer_kind = kind;
  s.tree_max_group = max_group;
  s.final_layer_tp_split = split;
  return s;
}

}  // namespace

TEST_CASE("tp_degree 1 is bit-identical to serial") {
  ModelConfig m = matrix_config(4);
  auto arch = Architecture::flat(m);
  auto master = master_for(arch, 1);
  Batch batch = SyntheticDataset(m, 2).batch(0, 2);
  auto serial = run_serial_step(arch, master, batch);
  for (auto* run : {&run_tp_step, &run_dist_token_step}) {
    auto out = run(ParallelConfig{1, 1, 1}, m, master, batch, {});
    CHECK(out.loss == serial.loss);
    CHECK(out.grads == serial.grads);
  }
  CHECK(serial.ledger.empty());
}

TEST_CASE("tp_only and dist_token match serial across the test matrix") {
  for (std::size_t C : {4, 8, 16}) {
    for (std::size_t tp : {2, 4}) {
      for (AggVariant v : {AggVariant::single_query, AggVariant::full_cross}) {
        CAPTURE(C);
        CAPTURE(tp);
        CAPTURE(to_string(v));
        ModelConfig m = matrix_config(C, v);
        auto arch = Architecture::flat(m);
        auto master = master_for(arch, C + tp);
        Batch batch = SyntheticDataset(m, 3).batch(0, 2);
        auto serial = run_serial_step(arch, master, batch);
        auto tp_out = run_tp_step(ParallelConfig{tp, 1, 1}, m, master, batch);
        auto dt_out = run_dist_token_step(ParallelConfig{tp, 1, 1}, m, master, batch);
        CHECK(rel(tp_out.loss, serial.loss) < 1e-10);
        CHECK(rel(dt_out.loss, serial.loss) < 1e-10);
        CHECK(max_grad_rel_diff(tp_out.grads, serial.grads) < 1e-10);
        CHECK(max_grad_rel_diff(dt_out.grads, serial.grads) < 1e-10);
        CHECK(max_grad_rel_diff(dt_out.grads, tp_out.grads) < 1e-10);
        for (double l : tp_out.rank_loss) CHECK(l == tp_out.loss);
      }
    }
  }
}

TEST_CASE("tp ledger and tokenizer redundancy") {
  ModelConfig m = matrix_config(8);
  auto arch = Architecture::flat(m);
  auto master = master_for(arch, 4);
  Batch batch = SyntheticDataset(m, 5).batch(0, 2);
  const std::size_t tp = 4;
  auto serial = run_serial_step(arch, master, batch);
  auto tp_out = run_tp_step(ParallelConfig{tp, 1, 1}, m, master, batch);
  auto dt_out = run_dist_token_step(ParallelConfig{tp, 1, 1}, m, master, batch);

  CHECK(tp_out.ledger.query({.phase = Phase::backward, .axis = Axis::tp, .op = CollectiveOp::reduce_scatter}).events > 0);
  CHECK(tp_out.ledger.query({.phase = Phase::forward, .axis = Axis::tp, .op = CollectiveOp::all_gather}).events > 0);

  const auto serial_tok = serial.stats[0].tag_flops(tags::tokenize);
  CHECK(serial_tok > 0);
  for (std::size_t r = 0; r < tp; ++r) {
    CHECK(tp_out.stats[r].tag_flops(tags::tokenize) == serial_tok);
    CHECK(dt_out.stats[r].tag_flops(tags::tokenize) * tp == serial_tok);
  }

  // One channel-axis gather per rank in forward.
  const std::size_t S = m.spatial_tokens(), B = 2;
  auto g = dt_out.ledger.query({.phase = Phase::forward, .rank = 0, .tag_prefix = "tokenize.gather"});
  CHECK(g.events == 1);
  CHECK(g.bytes == B * (m.channels / tp) * S * m.embed * 8 * (tp - 1));
  CHECK(dt_out.ledger.query({.phase = Phase::backward, .tag_prefix = "tokenize.gather"}).events == 0);
  // The shared positional embedding's gradient is summed over the group.
  CHECK(dt_out.ledger.query({.phase = Phase::backward, .rank = 0, .tag_prefix = "tokenize.pos_embed"}).events == 2);
}

TEST_CASE("heads must divide by tp") {
  ModelConfig m = matrix_config(4);
  auto master = init_parameters(Architecture::flat(m), 1);
  Batch batch = SyntheticDataset(m, 5).batch(0, 1);
  CHECK_THROWS_AS(run_tp_step(ParallelConfig{3, 1, 1}, m, master, batch), ConfigError);
  CHECK_THROWS_AS(run_dist_token_step(ParallelConfig{2, 1, 1}, matrix_config(6), master, batch), ConfigError);
}

TEST_CASE("dchag matches the single-process same-architecture reference") {
  for (AggLayerKind kind : {AggLayerKind::linear, AggLayerKind::cross_attention}) {
    for (bool split : {false, true}) {
      for (std::size_t max_group : {0, 2}) {
        CAPTURE(to_string(kind));
        CAPTURE(split);
        CAPTURE(max_group);
        ModelConfig m = matrix_config(16);
        auto s = dchag(4, kind, max_group, split);
        auto arch = strategy_architecture(m, s);
        auto master = master_for(arch, 7);
        Batch batch = SyntheticDataset(m, 8).batch(0, 2);
        auto ref = run_serial_step(arch, master, batch);
        auto out = run_dchag_step(ParallelConfig{4, 1, 1}, s, m, master, batch);
        CHECK(rel(out.loss, ref.loss) < 1e-10);
        CHECK(max_grad_rel_diff(out.grads, ref.grads) < 1e-10);

        // The gather boundary never communicates in backward.
        CHECK(out.ledger.query({.phase = Phase::backward, .axis = Axis::tp, .tag_prefix = "dchag."}).events == 0);
        auto agg_bwd = out.ledger.query({.phase = Phase::backward, .axis = Axis::tp, .tag_prefix = "agg."});
        if (split)
          CHECK(agg_bwd.events > 0);
        else
          CHECK(agg_bwd.events == 0);
        auto boundary = out.ledger.query({.phase = Phase::forward, .rank = 0, .tag_prefix = "dchag.boundary"});
        CHECK(boundary.events == 1);
        CHECK(boundary.bytes == 2 * m.spatial_tokens() * m.embed * 8 * 3);
      }
    }
  }
}

TEST_CASE("dchag with one rank is the serial tree model bit-exactly") {
  ModelConfig m = matrix_config(8);
  auto s = dchag(1, AggLayerKind::cross_attention, 2);
  auto arch = strategy_architecture(m, s);
  auto master = master_for(arch, 9);
  Batch batch = SyntheticDataset(m, 10).batch(0, 2);
  auto ref = run_serial_step(arch, master, batch);
  auto out = run_dchag_step(ParallelConfig{1, 1, 1}, s, m, master, batch);
  CHECK(out.loss == ref.loss);
  CHECK(out.grads == ref.grads);
}

TEST_CASE("dchag boundary gather is C/tp times smaller than dist_token's") {
  ModelConfig m = tiny_config();
  m.channels = 256;
  m.image_h = m.image_w = 2;
  m.patch = 2;
  m.embed = 4;
  m.heads = 4;
  m.depth = 0;
  m.decoder_depth = 0;
  m.decoder_dim = 2;
  m.decoder_heads = 1;
  Batch batch = SyntheticDataset(m, 11).batch(0, 1);
  auto flat_master = init_parameters(Architecture::flat(m), 1);
  auto dt = run_dist_token_step(ParallelConfig{4, 1, 1}, m, flat_master, batch);
  auto s = dchag(4, AggLayerKind::linear);
  auto dc = run_dchag_step(ParallelConfig{4, 1, 1}, s, m, init_parameters(strategy_architecture(m, s), 1), batch);
  auto a = dt.ledger.query({.phase = Phase::forward, .rank = 0, .tag_prefix = "tokenize.gather"});
  auto b = dc.ledger.query({.phase = Phase::forward, .rank = 0, .tag_prefix = "dchag.boundary"});
  REQUIRE(b.bytes > 0);
  CHECK(a.bytes == 64 * b.bytes);
}

TEST_CASE("hybrid data parallel equals the serial large batch") {
  ModelConfig m = matrix_config(8);
  auto s = dchag(2, AggLayerKind::cross_attention, 2);
  auto arch = strategy_architecture(m, s);
  auto master = master_for(arch, 12);
  SyntheticDataset data(m, 13);

  for (auto [fsdp, dp] : {std::pair<std::size_t, std::size_t>{1, 2}, {2, 1}, {2, 2}}) {
    CAPTURE(fsdp);
    CAPTURE(dp);
    std::vector<Batch> batches;
    Batch all;
    for (std::size_t i = 0; i < fsdp * dp; ++i) {
      batches.push_back(data.batch(2 * i, 2));
      all = i == 0 ? batches.back() : concat_batches(all, batches.back());
    }
    auto ref = run_serial_step(arch, master, all);
    auto out = run_hybrid_step(ParallelConfig{2, fsdp, dp}, s, m, master, batches);
    CHECK(max_grad_rel_diff(out.grads, ref.grads) < 1e-10);
    double mean_loss = 0.0;
    for (std::size_t r = 0; r < out.rank_loss.size(); r += 2) mean_loss += out.rank_loss[r];
    CHECK(rel(mean_loss / double(fsdp * dp), ref.loss) < 1e-10);

    // Every rank ends the step with the same averaged gradients as its TP peers in other replicas.
    for (std::size_t r = 2; r < out.rank_params.size(); ++r)
      CHECK(gradients(out.rank_params[r]) == gradients(out.rank_params[r % 2]));

    const std::size_t groups = 3 + m.depth + 1;  // tokenize, aggregate, vit.embed, blocks, decoder
    for (std::size_t r = 0; r < out.rank_params.size(); ++r) {
      auto ar = out.ledger.query({.axis = Axis::dp, .op = CollectiveOp::all_reduce, .rank = r});
      CHECK(ar.events == (dp > 1 ? groups : 0));
      auto fs = out.ledger.query({.axis = Axis::fsdp, .rank = r});
      CHECK(fs.events == (fsdp > 1 ? 4 * groups : 0));
    }
    if (fsdp > 1) {
      CHECK(out.ledger.query({.phase = Phase::forward, .axis = Axis::fsdp, .op = CollectiveOp::all_gather}).events ==
            out.rank_params.size() * groups);
      CHECK(out.ledger.query({.phase = Phase::backward, .axis = Axis::fsdp, .op = CollectiveOp::reduce_scatter}).events ==
            out.rank_params.size() * groups);
    }
  }
}

TEST_CASE("hybrid with unit fsdp and dp is the dchag step bit-exactly") {
  ModelConfig m = matrix_config(8);
  auto s = dchag(2, AggLayerKind::linear, 2);
  auto master = master_for(strategy_architecture(m, s), 14);
  Batch batch = SyntheticDataset(m, 15).batch(0, 2);
  auto a = run_dchag_step(ParallelConfig{2, 1, 1}, s, m, master, batch);
  auto b = run_hybrid_step(ParallelConfig{2, 1, 1}, s, m, master, {batch});
  CHECK(a.loss == b.loss);
  CHECK(a.grads == b.grads);
  CHECK(a.ledger.events() == b.ledger.events());
  CHECK_THROWS_AS(run_hybrid_step(ParallelConfig{2, 2, 1}, s, m, master, {batch}), ConfigError);
}

TEST_CASE("sharding round trip and replicated weights") {
  ModelConfig m = matrix_config(8);
  for (StrategyKind kind : {StrategyKind::tp_only, StrategyKind::dist_token, StrategyKind::dchag}) {
    StrategyConfig s;
    s.kind = kind;
    s.tp = 4;
    s.tree_max_group = 2;
    s.final_layer_tp_split = true;
    auto arch = strategy_architecture(m, s);
    auto master = master_for(arch, 16);
    std::vector<ParamStore> ranks;
    for (std::size_t t = 0; t < 4; ++t) ranks.push_back(shard_parameters(master, s, t));
    std::vector<const ParamStore*> ptrs;
    for (auto& r : ranks) ptrs.push_back(&r);
    auto back = unshard(master, s, ptrs, false);
    for (std::size_t i = 0; i < master.size(); ++i) {
      auto d = master.tensors()[i].data();
      CHECK(back[master.infos()[i].name] == std::vector<double>(d.begin(), d.end()));
    }
    auto a = ranks[0].get("vit.block0.ln1.gamma").data(), b = ranks[3].get("vit.block0.ln1.gamma").data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
    // Rank r owns heads [r*H/tp, (r+1)*H/tp): columns [2r, 2r+2) of wq.
    auto wq = ranks[1].get("vit.block0.attn.wq");
    CHECK(wq.shape() == Shape{8, 2});
    CHECK(wq.at({3, 1}) == master.get("vit.block0.attn.wq").at({3, 3}));
  }
}

TEST_CASE("replicated gradients are bit-identical across the TP group") {
  ModelConfig m = matrix_config(8);
  auto s = dchag(4, AggLayerKind::cross_attention, 0, false);
  auto master = master_for(strategy_architecture(m, s), 17);
  Batch batch = SyntheticDataset(m, 18).batch(0, 2);
  auto out = run_dchag_step(ParallelConfig{4, 1, 1}, s, m, master, batch);
  for (std::size_t i = 0; i < out.rank_params[0].size(); ++i) {
    const auto& info = out.rank_params[0].infos()[i];
    const bool replicated = !is_tp_split(info, s) && info.shard != ShardKind::channel_slab &&
                            info.shard != ShardKind::slab_owned;
    if (!replicated) continue;
    for (std::size_t r = 1; r < 4; ++r) {
      auto a = out.rank_params[0].get(info.name).grad(), b = out.rank_params[r].get(info.name).grad();
      CAPTURE(info.name);
      CHECK(std::equal(a.begin(), a.end(), b.begin()));
    }
  }
}

TEST_CASE("strategy runs are scheduling independent") {
  ModelConfig m = matrix_config(8);
  auto s = dchag(2, AggLayerKind::cross_attention, 2, true);
  auto master = master_for(strategy_architecture(m, s), 19);
  SyntheticDataset data(m, 20);
  std::vector<Batch> batches{data.batch(0, 1), data.batch(1, 1)};
  auto a = run_hybrid_step(ParallelConfig{2, 1, 2}, s, m, master, batches);
  auto b = run_hybrid_step(ParallelConfig{2, 1, 2}, s, m, master, batches, SchedulerOptions{12345});
  CHECK(a.rank_loss == b.rank_loss);
  CHECK(a.grads == b.grads);
  CHECK(a.ledger.events() == b.ledger.events());
}

TEST_CASE("weight CSV round trip preserves bits") {
  ModelConfig m = matrix_config(4);
  auto arch = Architecture::flat(m);
  auto a = master_for(arch, 21);
  Tensor w = a.get("tok.weight");
  w.mutable_data()[0] = 0.1 + 0.2;
  w.mutable_data()[1] = -1e-300;
  w.mutable_data()[2] = 5e-324;
  std::stringstream ss;
  write_weights_csv(ss, a);
  auto b = init_parameters(arch, 99);
  load_weights(b, read_weights_csv(ss));
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto x = a.tensors()[i].data(), y = b.tensors()[i].data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
  std::stringstream bad("name,shape,values\ntok.weight,2x2,1 2 3\n");
  CHECK_THROWS_AS(read_weights_csv(bad), ConfigError);
}

TEST_CASE("serial golden loss") {
  ModelConfig m = tiny_config();
  auto arch = Architecture::flat(m);
  auto master = init_parameters(arch, 2024);
  Batch batch = SyntheticDataset(m, 7).batch(0, 2);
  auto out = run_serial_step(arch, master, batch);
  INFO("loss " << std::setprecision(17) << out.loss);
  CHECK(out.loss == doctest::Approx(0.31962457744687223).epsilon(1e-12));
}
