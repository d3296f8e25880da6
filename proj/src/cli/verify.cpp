#include "chag/cli/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <sstream>

#include "chag/cost/calibration.hpp"
#include "chag/cost/planner.hpp"
#include "chag/cost/presets.hpp"
#include "chag/model/model.hpp"
#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"
#include "chag/tensor/rng.hpp"

namespace chag {

namespace {

std::string fmt(const char* f, double a, double b = 0.0) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::vector<Batch> replica_batches(const RunConfig& c, std::uint64_t seed) {
  SyntheticDataset data(c.model, seed + 1);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < c.parallel.fsdp * c.parallel.dp; ++i) out.push_back(data.batch(i * c.batch, c.batch));
  return out;
}

double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace

std::vector<CheckResult> verify_grad(const RunConfig& c, std::uint64_t seed, std::size_t probes) {
  const Architecture arch = strategy_architecture(c.model, c.strategy);
  ParamStore params = init_parameters(arch, seed);
  const Batch batch = SyntheticDataset(c.model, seed + 1).batch(0, c.batch);
  params.zero_grad();
  mae_loss(arch, params, batch).backward();

  RngState rng(seed ^ 0x9e3779b97f4a7c15ULL);
  const double h = 1e-4;
  double worst = 0.0;
  std::string worst_name;
  for (std::size_t k = 0; k < probes; ++k) {
    const std::size_t t = rng.below(params.size());
    Tensor p = params.tensors()[t];
    const std::size_t i = rng.below(p.numel());
    const double analytic = p.has_grad() ? p.grad()[i] : 0.0;
    auto value = [&] {
      NoGradGuard guard;
      return mae_loss(arch, params, batch).item();
    };
    auto d = p.mutable_data();
    const double saved = d[i];
    auto central = [&](double step) {
      d[i] = saved + step;
      const double up = value();
      d[i] = saved - step;
      const double down = value();
      d[i] = saved;
      return (up - down) / (2.0 * step);
    };
    // Richardson extrapolation of two central differences cancels the h^2 term.
    const double numeric = (4.0 * central(h / 2) - central(h)) / 3.0;
    const double e = rel_error(analytic, numeric, 1e-6);
    if (e >= worst) {
      worst = e;
      worst_name = params.infos()[t].name;
    }
  }
  return {{"finite differences (" + std::to_string(probes) + " probes)", worst < 1e-4,
           fmt("max rel err %.2e", worst) + " at " + worst_name}};
}

std::vector<CheckResult> verify_equiv(const RunConfig& c, std::uint64_t seed) {
  const Architecture arch = strategy_architecture(c.model, c.strategy);
  const ParamStore master = init_parameters(arch, seed);
  const std::size_t replicas = c.parallel.fsdp * c.parallel.dp;
  StepOutput dist = run_step(c.strategy, c.parallel, c.model, master, replica_batches(c, seed));
  // Replica batches are consecutive samples, so the reference sees them concatenated.
  SyntheticDataset data(c.model, seed + 1);
  StepOutput ref = run_serial_step(arch, master, data.batch(0, c.batch * replicas));

  double loss = 0.0;
  for (std::size_t dp = 0; dp < c.parallel.dp; ++dp)
    for (std::size_t f = 0; f < c.parallel.fsdp; ++f) loss += dist.rank_loss[rank_of({0, f, dp}, c.parallel)];
  loss /= static_cast<double>(replicas);
  const double loss_err = std::abs(loss - ref.loss) / std::max(std::abs(ref.loss), 1e-300);
  const double grad_err = max_grad_rel_diff(dist.grads, ref.grads);
  const std::string label = std::string(to_string(c.strategy.kind));
  return {{label + " loss matches reference", loss_err < 1e-10, fmt("rel err %.2e", loss_err)},
          {label + " gradients match reference", grad_err < 1e-10, fmt("rel err %.2e", grad_err)}};
}

std::vector<CheckResult> verify_comm(const RunConfig& c, std::uint64_t seed) {
  const Architecture arch = strategy_architecture(c.model, c.strategy);
  const ParamStore master = init_parameters(arch, seed);
  StepOutput out = run_step(c.strategy, c.parallel, c.model, master, replica_batches(c, seed));
  const CommLedger& ledger = out.ledger;
  const std::uint64_t tp = c.parallel.tp;
  const std::uint64_t SD = c.model.spatial_tokens() * c.model.embed;
  std::vector<CheckResult> checks;

  if (c.strategy.kind == StrategyKind::dchag) {
    auto back = ledger.query({.phase = Phase::backward, .axis = Axis::tp, .tag_prefix = "dchag.boundary"});
    checks.push_back({"dchag boundary: no backward tp events", back.events == 0,
                      std::to_string(back.events) + " events"});
    if (tp > 1) {
      auto fwd = ledger.query({.phase = Phase::forward, .axis = Axis::tp, .rank = 0, .tag_prefix = "dchag.boundary"});
      const std::uint64_t want = c.batch * SD * 8 * (tp - 1);
      checks.push_back({"dchag boundary: one forward AllGather", fwd.events == 1 && fwd.bytes == want,
                        std::to_string(fwd.events) + " events, " + std::to_string(fwd.bytes) + " of " +
                            std::to_string(want) + " bytes"});
    }
  }
  if (c.strategy.kind == StrategyKind::dist_token && tp > 1) {
    auto g = ledger.query({.phase = Phase::forward, .axis = Axis::tp, .rank = 0, .tag_prefix = "tokenize.gather"});
    const std::uint64_t want = c.batch * (c.model.channels / tp) * SD * 8 * (tp - 1);
    checks.push_back({"channel gather payload", g.events == 1 && g.bytes == want,
                      std::to_string(g.events) + " events, " + std::to_string(g.bytes) + " of " +
                          std::to_string(want) + " bytes"});
  }
  if (c.parallel.dp > 1) {
    const std::size_t groups = group_param_counts(c.model, c.strategy).size();
    auto ar = ledger.query({.axis = Axis::dp, .op = CollectiveOp::all_reduce, .rank = 0});
    checks.push_back({"one dp AllReduce per parameter group", ar.events == groups,
                      std::to_string(ar.events) + " events, " + std::to_string(groups) + " groups"});
  }

  const CostReport r = estimate(c.model, c.strategy, c.parallel, c.hw, sizeof(double), c.batch);
  std::size_t mismatches = 0;
  std::ostringstream detail;
  for (Phase p : {Phase::forward, Phase::backward, Phase::optimizer})
    for (Axis a : {Axis::tp, Axis::fsdp, Axis::dp}) {
      auto t = ledger.query({.phase = p, .axis = a, .rank = 0});
      const CommCell& cell = r.comm_at(p, a);
      if (t.bytes != cell.bytes || t.events != cell.events) {
        ++mismatches;
        detail << to_string(p) << '/' << to_string(a) << ' ' << cell.bytes << " vs " << t.bytes << "; ";
      }
    }
  checks.push_back({"cost model predicts the ledger", mismatches == 0,
                    mismatches == 0 ? "9 cells exact" : detail.str()});
  return checks;
}

std::vector<CheckResult> full_scale_checks() {
  std::vector<CheckResult> checks;
  const HardwareModel hw;
  const std::size_t prec = kMixedPrecisionBytes;

  {
    StrategyConfig s;
    s.kind = StrategyKind::tp_only;
    const CostReport r = estimate(preset_model("1.7b", 1024), s, {}, hw, prec, 1);
    const double share = r.channel_stage_bytes() / r.memory_bytes();
    checks.push_back({"1.7b, 1024 channels: tokenize+aggregate share in [0.5, 0.9]",
                      share >= 0.5 && share <= 0.9, fmt("share %.3f", share)});
  }
  {
    PlanRequest req;
    req.model = preset_model("7b", 512);
    req.precision_bytes = prec;
    req.kind = StrategyKind::tp_only;
    const PlanResult t = plan(req);
    req.kind = StrategyKind::dchag;
    const PlanResult d = plan(req);
    const bool ok = d.feasible && (!t.feasible || t.parallel.ranks() > d.parallel.ranks());
    checks.push_back({"7b, 512 channels: tp_only needs more ranks than dchag-L", ok,
                      "tp_only " + (t.feasible ? std::to_string(t.parallel.ranks()) : std::string("infeasible")) +
                          ", dchag " + (d.feasible ? std::to_string(d.parallel.ranks()) : std::string("infeasible"))});
  }
  {
    PlanRequest req;
    req.model = preset_model("26b", 512);
    req.precision_bytes = prec;
    req.kind = StrategyKind::dchag;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& [s, pc] : plan_candidates(req, 16))
      if (s.kind == StrategyKind::dchag)
        best = std::min(best, estimate(req.model, s, pc, hw, prec, 1).memory_bytes());
    const double util = best / static_cast<double>(hw.bytes_per_gpu);
    req.kind = StrategyKind::tp_only;
    bool tp_fits = false;
    for (const auto& [s, pc] : plan_candidates(req, 16))
      tp_fits = tp_fits || estimate(req.model, s, pc, hw, prec, 1).fits;
    checks.push_back({"26b, 512 channels on 16 ranks: dchag under 80%, tp_only infeasible",
                      util < 0.8 && !tp_fits,
                      fmt("dchag uses %.0f%% of memory", 100.0 * util) + (tp_fits ? ", tp_only fits" : "")});
  }
  {
    double best = 0.0;
    std::string where;
    for (const char* name : {"1.7b", "7b"})
      for (std::size_t C : {128, 256, 512, 1024}) {
        const ModelConfig m = preset_model(name, C);
        StrategyConfig t;
        t.kind = StrategyKind::tp_only;
        t.tp = 8;
        StrategyConfig d = t;
        d.kind = StrategyKind::dchag;
        const ParallelConfig pc{8, 1, 1};
        const double a = estimate(m, t, pc, hw, prec, 1).channel_stage_bytes();
        const double b = estimate(m, d, pc, hw, prec, 1).channel_stage_bytes();
        if (1.0 - b / a > best) {
          best = 1.0 - b / a;
          where = std::string(name) + " C=" + std::to_string(C);
        }
      }
    checks.push_back({"dchag-L vs tp_only channel-stage reduction reaches 70%", best >= 0.7,
                      fmt("max %.1f%%", 100.0 * best) + " at " + where});
  }
  return checks;
}

std::vector<CheckResult> verify_cost() {
  std::vector<CheckResult> checks;
  double worst = 0.0;
  bool flops_exact = true;
  for (const auto& c : desk_calibration_cases()) {
    const CalibrationPoint p = calibrate(c);
    worst = std::max(worst, p.worst_activation_error());
    for (std::size_t k = 0; k < 4; ++k) flops_exact = flops_exact && p.predicted_flops[k] == p.measured_flops[k];
  }
  checks.push_back({"desk calibration: activations within 30%", worst <= 0.3, fmt("worst %.1f%%", 100.0 * worst)});
  checks.push_back({"desk calibration: FLOPs exact", flops_exact, ""});

  const std::vector<double> cs{32, 64, 128, 256};
  std::vector<double> flat, tree;
  StrategyConfig hier;
  hier.kind = StrategyKind::dchag;
  hier.tree_max_group = 32;
  hier.agg_layer_kind = AggLayerKind::cross_attention;
  for (double C : cs) {
    ModelConfig m;
    m.channels = static_cast<std::size_t>(C);
    m.agg_variant = AggVariant::full_cross;
    m.heads = 4;
    m.decoder_heads = 2;
    flat.push_back(estimate(m, StrategyConfig{}, {})[Component::aggregate].activation_bytes);
    tree.push_back(estimate(m, hier, {})[Component::aggregate].activation_bytes);
  }
  const double qf = fit_quadratic(cs, flat).quadratic_share(256);
  const double qt = fit_quadratic(cs, tree).quadratic_share(256);
  checks.push_back({"closed form: flat aggregation quadratic in channels", qf > 0.5, fmt("C^2 share %.3f", qf)});
  checks.push_back({"closed form: tree aggregation linear in channels", std::abs(qt) < 0.05,
                    fmt("C^2 share %.4f", qt)});

  PlanRequest req;
  req.model = preset_model("1.7b", 128);
  req.hw.bytes_per_gpu = std::numeric_limits<std::uint64_t>::max();
  const PlanResult p = plan(req);
  checks.push_back({"unbounded budget plans one rank", p.feasible && p.parallel.ranks() == 1,
                    std::to_string(p.parallel.ranks()) + " ranks"});

  for (auto& c : full_scale_checks()) checks.push_back(std::move(c));
  return checks;
}

std::vector<CheckResult> run_suite(const std::string& suite, const RunConfig& c, std::uint64_t seed) {
  if (suite == "grad") return verify_grad(c, seed);
  if (suite == "equiv") return verify_equiv(c, seed);
  if (suite == "comm") return verify_comm(c, seed);
  if (suite == "cost") return verify_cost();
  throw ConfigError("unknown verify suite '" + suite + "'");
}

void print_checks(std::ostream& os, const std::vector<CheckResult>& checks) {
  std::size_t width = 0;
  for (const auto& c : checks) width = std::max(width, c.name.size());
  for (const auto& c : checks) {
    os << (c.pass ? "PASS  " : "FAIL  ") << c.name << std::string(width - c.name.size() + 2, ' ') << c.detail
       << '\n';
  }
  std::size_t passed = 0;
  for (const auto& c : checks) passed += c.pass;
  os << passed << '/' << checks.size() << " checks passed\n";
}

bool all_pass(const std::vector<CheckResult>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.pass; });
}

}  // namespace chag
