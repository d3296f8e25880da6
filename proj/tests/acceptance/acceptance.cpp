// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "chag/cli/commands.hpp"
#include "chag/cli/verify.hpp"
#include "chag/cost/calibration.hpp"
#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"

using namespace chag;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

ModelConfig tiny(std::size_t channels, AggVariant v) {
  ModelConfig m;
  m.channels = channels;
  m.image_h = m.image_w = 8;
  m.patch = 4;
  m.embed = 16;
  m.depth = 2;
  m.heads = 4;
  m.agg_variant = v;
  m.decoder_dim = 8;
  m.decoder_heads = 2;
  return m;
}

StrategyConfig strategy(StrategyKind k, std::size_t tp, std::size_t mg = 0,
                        AggLayerKind layer = AggLayerKind::linear) {
  StrategyConfig s;
  s.kind = k;
  s.tp = tp;
  s.tree_max_group = mg;
  s.agg_layer_kind = layer;
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

Batch batch_for(const ModelConfig& m, std::size_t count, std::uint64_t seed = 2) {
  return SyntheticDataset(m, seed).batch(0, count);
}

constexpr AggVariant kVariants[] = {AggVariant::single_query, AggVariant::full_cross};

Outcome gradient_correctness() {
  Outcome o;
  struct Case {
    const char* name;
    std::size_t channels;
    AggVariant variant;
    StrategyConfig s;
  };
  const Case cases[] = {
      {"flat single_query C4", 4, AggVariant::single_query, {}},
      {"flat full_cross C8", 8, AggVariant::full_cross, {}},
      {"tree linear C8", 8, AggVariant::full_cross, strategy(StrategyKind::dchag, 2, 2)},
      {"tree cross C8", 8, AggVariant::single_query,
       strategy(StrategyKind::dchag, 2, 2, AggLayerKind::cross_attention)},
  };
  for (const auto& c : cases) {
    RunConfig rc;
    rc.model = tiny(c.channels, c.variant);
    rc.strategy = c.s;
    rc.parallel.tp = c.s.tp;
    auto checks = verify_grad(rc, 3, 25);
    o.require(checks.front().pass, std::string(c.name) + ": " + checks.front().detail);
  }
  if (o.pass) o.detail = std::to_string(std::size(cases)) + " configs, 25 probes each, all < 1e-4";
  return o;
}

Outcome tp_equivalence() {
  Outcome o;
  double worst = 0.0;
  for (std::size_t C : {4, 8})
    for (AggVariant v : kVariants)
      for (std::size_t tp : {2, 4}) {
        const ModelConfig m = tiny(C, v);
        const ParamStore master = init_parameters(Architecture::flat(m), 5);
        const Batch b = batch_for(m, 2);
        StepOutput ref = run_serial_step(Architecture::flat(m), master, b);
        StepOutput out = run_tp_step({tp, 1, 1}, m, master, b);
        worst = std::max({worst, rel(out.loss, ref.loss), max_grad_rel_diff(out.grads, ref.grads)});
      }
  o.require(worst < 1e-10, fmt("max rel err %.2e", worst));
  if (o.pass) o.detail = fmt("8 configs, max rel err %.2e", worst);
  return o;
}

Outcome dist_token() {
  Outcome o;
  double worst = 0.0;
  for (std::size_t C : {4, 8})
    for (AggVariant v : kVariants)
      for (std::size_t tp : {2, 4}) {
        const ModelConfig m = tiny(C, v);
        const ParamStore master = init_parameters(Architecture::flat(m), 6);
        const Batch b = batch_for(m, 1);
        StepOutput ref = run_tp_step({tp, 1, 1}, m, master, b);
        StepOutput out = run_dist_token_step({tp, 1, 1}, m, master, b);
        worst = std::max({worst, rel(out.loss, ref.loss), max_grad_rel_diff(out.grads, ref.grads)});
        const std::uint64_t want = (C / tp) * m.spatial_tokens() * m.embed * 8 * (tp - 1);
        for (std::size_t r = 0; r < tp; ++r) {
          auto g = out.ledger.query({.phase = Phase::forward, .axis = Axis::tp, .op = CollectiveOp::all_gather,
                                     .rank = r, .tag_prefix = "tokenize.gather"});
          o.require(g.events == 1 && g.bytes == want,
                    fmt("C%.0f tp%.0f: gather %.0f bytes", double(C), double(tp), double(g.bytes)));
        }
      }
  o.require(worst < 1e-10, fmt("max rel err %.2e", worst));
  if (o.pass) o.detail = fmt("8 configs, max rel err %.2e, gather payloads exact", worst);
  return o;
}

// Criteria 4 and 5 share the same runs.
struct DchagMatrix {
  Outcome equivalence, contract;
};

DchagMatrix dchag_matrix() {
  DchagMatrix res;
  double worst = 0.0;
  std::size_t runs = 0;
  for (AggVariant v : kVariants)
    for (std::size_t tp : {2, 4})
      for (AggLayerKind layer : {AggLayerKind::linear, AggLayerKind::cross_attention})
        for (std::size_t mg : {2, 4}) {
          const ModelConfig m = tiny(16, v);
          const StrategyConfig s = strategy(StrategyKind::dchag, tp, mg, layer);
          const Architecture arch = strategy_architecture(m, s);
          const ParamStore master = init_parameters(arch, 7);
          const Batch b = batch_for(m, 1);
          StepOutput ref = run_serial_step(arch, master, b);
          StepOutput out = run_dchag_step({tp, 1, 1}, s, m, master, b);
          worst = std::max({worst, rel(out.loss, ref.loss), max_grad_rel_diff(out.grads, ref.grads)});
          ++runs;

          auto back = out.ledger.query({.phase = Phase::backward, .axis = Axis::tp, .tag_prefix = "dchag.boundary"});
          res.contract.require(back.events == 0, fmt("%.0f backward boundary events", double(back.events)));
          const std::uint64_t want = m.spatial_tokens() * m.embed * 8 * (tp - 1);
          for (std::size_t r = 0; r < tp; ++r) {
            auto fwd = out.ledger.query({.phase = Phase::forward, .axis = Axis::tp, .rank = r,
                                         .tag_prefix = "dchag.boundary"});
            auto ag = out.ledger.query({.phase = Phase::forward, .axis = Axis::tp, .op = CollectiveOp::all_gather,
                                        .rank = r, .tag_prefix = "dchag.boundary"});
            res.contract.require(fwd.events == 1 && ag.events == 1 && ag.bytes == want,
                                 fmt("forward boundary %.0f events, %.0f bytes", double(fwd.events),
                                     double(ag.bytes)));
          }
          if (layer == AggLayerKind::linear && mg == 2) {
            // Same model under distributed tokenization: its gather is C/tp times larger.
            StepOutput dt = run_dist_token_step({tp, 1, 1}, m, init_parameters(Architecture::flat(m), 7), b);
            auto g = dt.ledger.query({.phase = Phase::forward, .axis = Axis::tp, .rank = 0,
                                      .tag_prefix = "tokenize.gather"});
            res.contract.require(g.bytes == want * (m.channels / tp),
                                 fmt("dist_token gather %.0f bytes vs boundary %.0f", double(g.bytes), double(want)));
          }
        }
  res.equivalence.require(worst < 1e-10, fmt("max rel err %.2e", worst));
  if (res.equivalence.pass) res.equivalence.detail = fmt("%.0f runs, max rel err %.2e", double(runs), worst);
  if (res.contract.pass)
    res.contract.detail = fmt("%.0f runs: 0 backward boundary events, one S*D*8*(tp-1) AllGather, C/tp smaller than dist_token", double(runs));
  return res;
}

Outcome quadratic_to_linear() {
  Outcome o;
  const std::vector<double> cs{32, 64, 128, 256};
  std::vector<double> flat, tree, flat_cost, tree_cost;
  for (double cd : cs) {
    ModelConfig m = tiny(static_cast<std::size_t>(cd), AggVariant::full_cross);
    m.embed = 8;
    m.depth = 1;
    m.heads = 2;
    m.tree_max_group = 32;
    m.agg_layer_kind = AggLayerKind::cross_attention;
    const Batch b = batch_for(m, 1);
    for (bool hier : {false, true}) {
      const Architecture arch = hier ? Architecture::hierarchical(m, 1) : Architecture::flat(m);
      StepOutput out = run_serial_step(arch, init_parameters(arch, 8), b);
      (hier ? tree : flat).push_back(double(out.stats.at(0).alloc.tag_peak(tags::aggregate)));
    }
    const StrategyConfig s = strategy(StrategyKind::dchag, 1, 32, AggLayerKind::cross_attention);
    flat_cost.push_back(estimate(m, StrategyConfig{}, {})[Component::aggregate].activation_bytes);
    tree_cost.push_back(estimate(m, s, {})[Component::aggregate].activation_bytes);
  }
  const double qf = fit_quadratic(cs, flat).quadratic_share(256);
  const double qt = fit_quadratic(cs, tree).quadratic_share(256);
  const double cf = fit_quadratic(cs, flat_cost).quadratic_share(256);
  const double ct = fit_quadratic(cs, tree_cost).quadratic_share(256);
  o.require(qf > 0.5, fmt("measured flat C^2 share %.3f", qf));
  o.require(std::abs(qt) < 0.05, fmt("measured tree C^2 share %.4f", qt));
  o.require(cf > 0.5, fmt("cost-model flat C^2 share %.3f", cf));
  o.require(std::abs(ct) < 0.05, fmt("cost-model tree C^2 share %.4f", ct));
  if (o.pass)
    o.detail = fmt("C^2 share at 256: measured flat %.3f tree %.4f", qf, qt) +
               fmt(", cost model flat %.3f tree %.4f", cf, ct);
  return o;
}

Outcome calibration() {
  Outcome o;
  double worst = 0.0;
  std::size_t n = 0;
  for (const auto& c : desk_calibration_cases()) {
    const CalibrationPoint p = calibrate(c);
    worst = std::max(worst, p.worst_activation_error());
    ++n;
  }
  o.require(n == 12, fmt("%.0f configs", double(n)));
  o.require(worst <= 0.3, fmt("worst error %.1f%%", 100.0 * worst));
  if (o.pass) o.detail = fmt("%.0f configs, worst per-component error %.1f%%", double(n), 100.0 * worst);
  return o;
}

Outcome full_scale() {
  Outcome o;
  std::string all;
  for (const auto& c : full_scale_checks()) {
    o.require(c.pass, c.name + " (" + c.detail + ")");
    all += (all.empty() ? "" : "; ") + c.detail;
  }
  if (o.pass) o.detail = all;
  return o;
}

Outcome hybrid_dp() {
  Outcome o;
  double worst = 0.0;
  for (StrategyKind k : {StrategyKind::serial, StrategyKind::tp_only, StrategyKind::dchag})
    for (std::size_t fsdp : {1, 2}) {
      RunConfig c;
      c.model = tiny(8, AggVariant::full_cross);
      const std::size_t tp = k == StrategyKind::serial ? 1 : 2;
      c.strategy = strategy(k, tp, k == StrategyKind::dchag ? 2 : 0);
      c.parallel = {tp, fsdp, 2};
      c.batch = 2;
      const Architecture arch = strategy_architecture(c.model, c.strategy);
      const ParamStore master = init_parameters(arch, 9);
      SyntheticDataset data(c.model, 10);
      std::vector<Batch> batches;
      for (std::size_t i = 0; i < 2 * fsdp; ++i) batches.push_back(data.batch(i * c.batch, c.batch));
      StepOutput out = run_step(c.strategy, c.parallel, c.model, master, batches);
      StepOutput ref = run_serial_step(arch, master, data.batch(0, c.batch * 2 * fsdp));
      worst = std::max(worst, max_grad_rel_diff(out.grads, ref.grads));
      const std::size_t groups = group_param_counts(c.model, c.strategy).size();
      for (std::size_t r = 0; r < c.parallel.ranks(); ++r) {
        auto ar = out.ledger.query({.axis = Axis::dp, .op = CollectiveOp::all_reduce, .rank = r});
        auto any = out.ledger.query({.axis = Axis::dp, .rank = r});
        o.require(ar.events == groups && any.events == groups,
                  fmt("rank %.0f: %.0f dp events for %.0f groups", double(r), double(any.events), double(groups)));
      }
      for (const auto& g : group_param_counts(c.model, c.strategy)) {
        auto per = out.ledger.query({.axis = Axis::dp, .rank = 0, .tag_prefix = "dp." + g.first});
        o.require(per.events == 1, "group " + g.first);
      }
    }
  o.require(worst < 1e-10, fmt("max rel err %.2e", worst));
  if (o.pass) o.detail = fmt("6 grids with dp=2, max rel err %.2e, one dp AllReduce per group", worst);
  return o;
}

Outcome training_demo() {
  Outcome o;
  RunConfig c;
  c.model = tiny(8, AggVariant::full_cross);
  c.strategy = strategy(StrategyKind::dchag, 2, 2, AggLayerKind::cross_attention);
  c.parallel.tp = 2;
  c.batch = 2;
  c.lr = 3e-3;
  std::string csv[2];
  double first = 0.0, last = 0.0;
  for (int k = 0; k < 2; ++k) {
    TrainResult r = train_model(c, 7, 200);
    std::ostringstream os;
    write_loss_csv(os, r.losses);
    csv[k] = os.str();
    first = r.losses.front();
    last = r.losses.back();
  }
  const double reduction = 1.0 - last / first;
  o.require(reduction >= 0.5, fmt("loss %.4f -> %.4f", first, last));
  o.require(csv[0] == csv[1], "loss CSVs differ");
  if (o.pass) o.detail = fmt("loss %.4f -> %.4f (%.1f%% lower), CSVs bit-identical", first, last, 100.0 * reduction);
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;  // 0: no runtime limit
    std::function<Outcome()> run;
  };
  DchagMatrix dchag;
  const std::vector<Criterion> criteria = {
      {1, "gradient correctness", 60, gradient_correctness},
      {2, "TP equivalence", 60, tp_equivalence},
      {3, "distributed-tokenization equivalence", 0, dist_token},
      {4, "D-CHAG self-consistency", 0, [&] { dchag = dchag_matrix(); return dchag.equivalence; }},
      {5, "communication contract", 0, [&] { return dchag.contract; }},
      {6, "quadratic to linear aggregation memory", 0, quadratic_to_linear},
      {7, "cost-model calibration", 0, calibration},
      {8, "full-scale ordinal reproduction", 0, full_scale},
      {9, "hybrid/DP correctness", 0, hybrid_dp},
      {10, "training demo", 300, training_demo},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.require(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_s > 0) o.require(secs < c.limit_s, fmt("took %.1f s", secs));
    failed += !o.pass;
    std::printf("%s criterion %2d  %-40s %s [%.2f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name,
                o.detail.c_str(), secs);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
