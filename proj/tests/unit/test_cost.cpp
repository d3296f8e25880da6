#include <doctest.h>

#include <limits>
#include <sstream>

#include "chag/cost/calibration.hpp"
#include "chag/cost/planner.hpp"
#include "chag/cost/presets.hpp"
#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"

using namespace chag;

namespace {

StrategyConfig strategy(StrategyKind k, std::size_t tp, std::size_t max_group = 0,
                        AggLayerKind layer = AggLayerKind::linear, bool split = false) {
  StrategyConfig s;
  s.kind = k;
  s.tp = tp;
  s.tree_max_group = max_group;
  s.agg_layer_kind = layer;
  s.final_layer_tp_split = split;
  return s;
}

ModelConfig desk_model(std::size_t C, AggVariant v = AggVariant::full_cross) {
  ModelConfig m;
  m.channels = C;
  m.agg_variant = v;
  m.image_h = m.image_w = 8;
  m.patch = 4;
  m.embed = 8;
  m.heads = 4;
  m.decoder_dim = 8;
  m.decoder_heads = 2;
  return m;
}

std::vector<StrategyConfig> desk_strategies() {
  return {strategy(StrategyKind::serial, 1),
          strategy(StrategyKind::tp_only, 2),
          strategy(StrategyKind::dist_token, 4),
          strategy(StrategyKind::dchag, 2, 2, AggLayerKind::linear),
          strategy(StrategyKind::dchag, 4, 2, AggLayerKind::cross_attention, true),
          strategy(StrategyKind::dchag, 2, 0, AggLayerKind::cross_attention, false)};
}

}  // namespace

TEST_CASE("7B-class encoder parameters near 12 L D^2") {
  ModelConfig m = preset_model("7b", 512);
  auto counts = component_counts(m, StrategyConfig{}, 1);
  const double vit = counts[static_cast<std::size_t>(Component::vit)].params;
  const double approx = 12.0 * 32 * 4096.0 * 4096.0;
  CHECK(approx == doctest::Approx(6.44e9).epsilon(0.01));
  CHECK(std::abs(vit / approx - 1.0) < 0.1);
  CHECK(std::abs(vit / 7e9 - 1.0) < 0.1);
}

TEST_CASE("parameter counts match the engine's sharded stores") {
  for (std::size_t C : {8, 16}) {
    for (AggVariant v : {AggVariant::single_query, AggVariant::full_cross}) {
      for (const auto& s : desk_strategies()) {
        ModelConfig m = desk_model(C, v);
        m.depth = 2;
        auto master = init_parameters(strategy_architecture(m, s), 1);
        ParamStore local = shard_parameters(master, s, 0);
        std::map<std::string, double> by_component, by_group;
        for (std::size_t i = 0; i < local.size(); ++i) {
          const auto& info = local.infos()[i];
          by_component[info.component] += static_cast<double>(local.tensors()[i].numel());
          by_group[param_group(info.name)] += static_cast<double>(local.tensors()[i].numel());
        }
        auto counts = component_counts(m, s, 1);
        for (Component c : kComponents) {
          CAPTURE(to_string(s.kind));
          CAPTURE(to_string(c));
          CHECK(counts[static_cast<std::size_t>(c)].params == by_component[std::string(to_string(c))]);
        }
        auto groups = group_param_counts(m, s);
        CHECK(groups.size() == by_group.size());
        for (const auto& [name, n] : groups) CHECK(n == by_group[name]);
      }
    }
  }
}

TEST_CASE("desk calibration: FLOPs exact, activations within 30%") {
  for (const auto& c : desk_calibration_cases()) {
    CAPTURE(c.name);
    CalibrationPoint p = calibrate(c);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(p.predicted_flops[i] == p.measured_flops[i]);
      CHECK(p.measured[i] > 0);
    }
    CHECK(p.worst_activation_error() < 0.30);
  }
}

TEST_CASE("communication prediction equals the ledger") {
  struct Grid {
    StrategyConfig s;
    ParallelConfig pc;
  };
  std::vector<Grid> grids;
  for (const auto& s : desk_strategies()) grids.push_back({s, {s.tp, 1, 1}});
  grids.push_back({strategy(StrategyKind::dchag, 2, 2), {2, 2, 1}});
  grids.push_back({strategy(StrategyKind::tp_only, 2), {2, 1, 2}});
  grids.push_back({strategy(StrategyKind::dist_token, 2), {2, 2, 2}});
  grids.push_back({strategy(StrategyKind::serial, 1), {1, 2, 2}});
  for (AggVariant v : {AggVariant::single_query, AggVariant::full_cross}) {
    for (const auto& g : grids) {
      ModelConfig m = desk_model(8, v);
      m.depth = 2;
      const std::size_t batch = 2;
      auto master = init_parameters(strategy_architecture(m, g.s), 3);
      SyntheticDataset data(m, 4);
      std::vector<Batch> batches;
      for (std::size_t i = 0; i < g.pc.fsdp * g.pc.dp; ++i) batches.push_back(data.batch(i * batch, batch));
      StepOutput out = run_step(g.s, g.pc, m, master, batches);
      CostReport r = estimate(m, g.s, g.pc, {}, 8, batch);
      for (Phase ph : {Phase::forward, Phase::backward, Phase::optimizer}) {
        for (Axis ax : {Axis::tp, Axis::fsdp, Axis::dp}) {
          CAPTURE(to_string(g.s.kind));
          CAPTURE(to_string(ph));
          CAPTURE(to_string(ax));
          LedgerTotals t = out.ledger.query({.phase = ph, .axis = ax, .rank = 0});
          CHECK(r.comm_at(ph, ax).bytes == t.bytes);
          CHECK(r.comm_at(ph, ax).events == t.events);
        }
      }
    }
  }
}

TEST_CASE("report invariants") {
  for (const auto& s : desk_strategies()) {
    ModelConfig m = desk_model(16);
    CostReport r = estimate(m, s, {s.tp, 2, 1}, {}, 8, 2);
    ComponentCost sum;
    for (const auto& c : r.components) {
      CHECK(c.params_bytes >= 0);
      CHECK(c.activation_bytes >= 0);
      CHECK(c.optimizer_bytes == 2 * c.params_bytes);
      CHECK(c.grad_bytes == c.params_bytes);
      sum += c;
    }
    CHECK(sum.memory_bytes() == doctest::Approx(r.memory_bytes()));
    CHECK(sum.flops == doctest::Approx(r.totals.flops));
    CHECK(r.fits == (r.memory_bytes() <= static_cast<double>(r.budget_bytes)));
    HardwareModel tight;
    tight.bytes_per_gpu = static_cast<std::uint64_t>(r.memory_bytes()) - 1;
    CHECK_FALSE(estimate(m, s, {s.tp, 2, 1}, tight, 8, 2).fits);
  }
  CHECK_THROWS_AS(estimate(desk_model(16), strategy(StrategyKind::tp_only, 2), {4, 1, 1}), ConfigError);
}

TEST_CASE("monotone in channels, embed, depth and batch") {
  auto components = [](const CostReport& r) {
    std::vector<double> v;
    for (const auto& c : r.components)
      for (double x : {c.params_bytes, c.activation_bytes, c.grad_bytes, c.optimizer_bytes, c.flops}) v.push_back(x);
    v.push_back(static_cast<double>(r.forward_comm_bytes()));
    return v;
  };
  auto nondecreasing = [&](const CostReport& a, const CostReport& b) {
    auto x = components(a), y = components(b);
    for (std::size_t i = 0; i < x.size(); ++i)
      if (y[i] < x[i]) return false;
    return true;
  };
  for (const auto& s : desk_strategies()) {
    for (AggVariant v : {AggVariant::single_query, AggVariant::full_cross}) {
      for (std::size_t C = 8; C < 256; C *= 2) {
        ModelConfig a = desk_model(C, v), b = desk_model(2 * C, v);
        CHECK(nondecreasing(estimate(a, s, {s.tp, 1, 1}), estimate(b, s, {s.tp, 1, 1})));
      }
      for (std::size_t D = 8; D < 128; D *= 2) {
        ModelConfig a = desk_model(16, v), b = desk_model(16, v);
        a.embed = D;
        b.embed = 2 * D;
        CHECK(nondecreasing(estimate(a, s, {s.tp, 1, 1}), estimate(b, s, {s.tp, 1, 1})));
      }
      for (std::size_t L = 0; L < 4; ++L) {
        ModelConfig a = desk_model(16, v), b = desk_model(16, v);
        a.depth = L;
        b.depth = L + 1;
        CHECK(nondecreasing(estimate(a, s, {s.tp, 1, 1}), estimate(b, s, {s.tp, 1, 1})));
      }
      for (std::size_t B = 1; B < 16; B *= 2)
        CHECK(nondecreasing(estimate(desk_model(16, v), s, {s.tp, 1, 1}, {}, 8, B),
                            estimate(desk_model(16, v), s, {s.tp, 1, 1}, {}, 8, 2 * B)));
    }
  }
}

TEST_CASE("single-channel single-query aggregation is the minimum over C") {
  auto agg = [](std::size_t C) {
    ModelConfig m = desk_model(C, AggVariant::single_query);
    return estimate(m, StrategyConfig{}, {})[Component::aggregate].activation_bytes;
  };
  const double base = agg(1);
  for (std::size_t C : {2, 3, 8, 64, 500}) CHECK(agg(C) > base);
}

TEST_CASE("dchag aggregate activations below tp_only for full_cross") {
  for (std::size_t tp : {2, 4}) {
    for (std::size_t g : {2, 4, 8}) {
      for (AggLayerKind k : {AggLayerKind::linear, AggLayerKind::cross_attention}) {
        for (std::size_t C = 2 * tp * g; C <= 1024; C *= 2) {
          ModelConfig m = desk_model(C);
          const auto d = estimate(m, strategy(StrategyKind::dchag, tp, g, k), {tp, 1, 1});
          const auto t = estimate(m, strategy(StrategyKind::tp_only, tp), {tp, 1, 1});
          CHECK(d[Component::aggregate].activation_bytes < t[Component::aggregate].activation_bytes);
        }
      }
    }
  }
}

TEST_CASE("closed form: flat quadratic, tree linear in channels") {
  const std::vector<double> cs{32, 64, 128, 256};
  std::vector<double> flat, tree;
  for (double c : cs) {
    ModelConfig m = desk_model(static_cast<std::size_t>(c));
    flat.push_back(estimate(m, StrategyConfig{}, {})[Component::aggregate].activation_bytes);
    tree.push_back(estimate(m, strategy(StrategyKind::dchag, 1, 32, AggLayerKind::cross_attention), {})
                       [Component::aggregate].activation_bytes);
  }
  CHECK(fit_quadratic(cs, flat).quadratic_share(256) > 0.5);
  CHECK(std::abs(fit_quadratic(cs, tree).quadratic_share(256)) < 0.05);
}

TEST_CASE("planner") {
  PlanRequest req;
  req.model = desk_model(16);
  req.hw.bytes_per_gpu = std::numeric_limits<std::uint64_t>::max();
  SUBCASE("unbounded budget gives one serial rank") {
    for (StrategyKind k : {StrategyKind::tp_only, StrategyKind::dchag}) {
      req.kind = k;
      PlanResult p = plan(req);
      CHECK(p.feasible);
      CHECK(p.parallel.ranks() == 1);
      CHECK(p.strategy.kind == StrategyKind::serial);
    }
  }
  SUBCASE("nothing fits") {
    req.hw.bytes_per_gpu = 16;
    req.rank_limit = 8;
    PlanResult p = plan(req);
    CHECK_FALSE(p.feasible);
    CHECK(p.candidates > 0);
  }
  SUBCASE("sound and minimal over the grid") {
    req.model = preset_model("1.7b", 512);
    req.hw = HardwareModel{};
    for (StrategyKind k : {StrategyKind::tp_only, StrategyKind::dist_token, StrategyKind::dchag}) {
      req.kind = k;
      PlanResult p = plan(req);
      REQUIRE(p.feasible);
      CHECK(p.report.fits);
      CHECK(p.report.ranks == p.parallel.ranks());
      for (std::size_t r = 1; r < p.parallel.ranks(); r *= 2)
        for (const auto& [s, pc] : plan_candidates(req, r))
          CHECK_FALSE(estimate(req.model, s, pc, req.hw, req.precision_bytes, req.batch).fits);
      for (const auto& [s, pc] : plan_candidates(req, p.parallel.ranks())) {
        auto r = estimate(req.model, s, pc, req.hw, req.precision_bytes, req.batch);
        if (r.fits) CHECK(r.forward_comm_bytes() >= p.report.forward_comm_bytes());
      }
    }
  }
}

TEST_CASE("where dchag fits, tp_only holds at least as much channel-stage memory") {
  for (const char* name : {"1.7b", "7b"}) {
    for (std::size_t C : {128, 256, 512, 1024}) {
      PlanRequest req;
      req.model = preset_model(name, C);
      req.kind = StrategyKind::dchag;
      for (std::size_t R = 1; R <= 64; R *= 2) {
        for (const auto& [s, pc] : plan_candidates(req, R)) {
          if (s.kind != StrategyKind::dchag) continue;
          auto d = estimate(req.model, s, pc, req.hw, 2, 1);
          if (!d.fits) continue;
          auto t = estimate(req.model, strategy(StrategyKind::tp_only, s.tp), pc, req.hw, 2, 1);
          CHECK(t.channel_stage_bytes() >= d.channel_stage_bytes());
        }
      }
    }
  }
}

TEST_CASE("sweep rows and csv") {
  ModelConfig m = preset_model("1.7b", 128);
  std::vector<SweepStrategy> st = {{"tp_only", strategy(StrategyKind::tp_only, 8), {8, 1, 1}},
                                   {"dchag-L", strategy(StrategyKind::dchag, 8), {8, 1, 1}}};
  auto rows = sweep(m, SweepAxis::channels, {128, 256, 512, 1024}, st, {}, 2, 1);
  CHECK(rows.size() == 8);
  std::ostringstream os;
  write_cost_csv(os, rows);
  std::string text = os.str();
  CHECK(std::count(text.begin(), text.end(), '\n') == 9);
  const auto cols = cost_csv_columns();
  CHECK(text.substr(0, text.find('\n')).find(cols.back()) != std::string::npos);
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line))
    CHECK(static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) == cols.size() - 1);
  CHECK(rows[6].report[Component::aggregate].memory_bytes() >
        rows[7].report[Component::aggregate].memory_bytes());
}

TEST_CASE("non power-of-two channels are accepted by the estimator") {
  ModelConfig m = preset_model("1.7b", 500);
  CHECK_NOTHROW(estimate(m, strategy(StrategyKind::tp_only, 4), {4, 1, 1}, {}, 2, 1));
  CHECK_NOTHROW(estimate(m, strategy(StrategyKind::dchag, 4, 16), {4, 1, 1}, {}, 2, 1));
  CHECK_THROWS_AS(estimate(m, strategy(StrategyKind::dchag, 8), {8, 1, 1}, {}, 2, 1), ConfigError);
}
