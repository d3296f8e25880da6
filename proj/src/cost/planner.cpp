#include "chag/cost/planner.hpp"

#include <ostream>

#include "chag/tensor/tensor.hpp"

namespace chag {

std::vector<std::pair<StrategyConfig, ParallelConfig>> plan_candidates(const PlanRequest& req,
                                                                      std::size_t ranks) {
  std::vector<std::pair<StrategyConfig, ParallelConfig>> out;
  auto push = [&](StrategyConfig s, ParallelConfig pc) {
    try {
      s.validate(req.model);
    } catch (const ConfigError&) {
      return;
    }
    out.emplace_back(s, pc);
  };
  if (ranks == 1) push(StrategyConfig{}, ParallelConfig{});
  if (req.kind == StrategyKind::serial) {
    if (ranks > 1) push(StrategyConfig{}, ParallelConfig{1, ranks, 1});
    return out;
  }
  for (std::size_t tp = 1; tp <= ranks; tp *= 2) {
    ParallelConfig pc{tp, ranks / tp, 1};
    StrategyConfig s;
    s.kind = req.kind;
    s.tp = tp;
    s.agg_layer_kind = req.layer_kind;
    s.final_layer_tp_split = req.final_layer_tp_split;
    if (req.kind != StrategyKind::dchag) {
      push(s, pc);
      continue;
    }
    const std::size_t local = req.model.channels / tp;
    push(s, pc);  // one node per slab
    for (std::size_t g = 2; g < local; g *= 2) {
      s.tree_max_group = g;
      push(s, pc);
    }
  }
  return out;
}

PlanResult plan(const PlanRequest& req) {
  req.model.validate();
  req.hw.validate();
  PlanResult best;
  for (std::size_t ranks = 1; ranks <= req.rank_limit; ranks *= 2) {
    bool found = false;
    for (const auto& [s, pc] : plan_candidates(req, ranks)) {
      CostReport r = estimate(req.model, s, pc, req.hw, req.precision_bytes, req.batch);
      ++best.candidates;
      if (!r.fits) continue;
      if (!found || r.forward_comm_bytes() < best.report.forward_comm_bytes()) {
        best.strategy = s;
        best.parallel = pc;
        best.report = r;
        found = true;
      }
    }
    if (found) {
      best.feasible = true;
      return best;
    }
  }
  return best;
}

std::string_view to_string(SweepAxis a) { return a == SweepAxis::channels ? "channels" : "embed"; }

SweepAxis parse_sweep_axis(std::string_view s) {
  if (s == "channels") return SweepAxis::channels;
  if (s == "embed") return SweepAxis::embed;
  throw ConfigError("unknown sweep axis '" + std::string(s) + "' (expected channels or embed)");
}

std::vector<CostRow> sweep(const ModelConfig& base, SweepAxis axis, const std::vector<std::size_t>& values,
                           const std::vector<SweepStrategy>& strategies, const HardwareModel& hw,
                           std::size_t precision_bytes, std::size_t batch) {
  std::vector<CostRow> rows;
  for (std::size_t v : values) {
    ModelConfig m = base;
    (axis == SweepAxis::channels ? m.channels : m.embed) = v;
    for (const auto& st : strategies) {
      CostRow row{st.label, m, st.strategy, st.parallel, batch,
                  estimate(m, st.strategy, st.parallel, hw, precision_bytes, batch)};
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<std::string> cost_csv_columns() {
  std::vector<std::string> cols = {"label",   "strategy", "tp",    "fsdp",  "dp",    "tree_max_group",
                                   "agg_layer_kind", "final_layer_tp_split", "channels", "embed",
                                   "depth",   "heads",    "batch", "ranks"};
  for (Component c : kComponents) {
    const std::string n(to_string(c));
    for (const char* f : {"_params_bytes", "_activation_bytes", "_grad_bytes", "_optimizer_bytes", "_flops"})
      cols.push_back(n + f);
  }
  for (const char* f : {"total_bytes", "total_flops"}) cols.emplace_back(f);
  for (Phase p : {Phase::forward, Phase::backward, Phase::optimizer})
    for (Axis a : {Axis::tp, Axis::fsdp, Axis::dp})
      cols.push_back(std::string(to_string(p)) + "_" + std::string(to_string(a)) + "_bytes");
  cols.emplace_back("budget_bytes");
  cols.emplace_back("fits");
  return cols;
}

void write_cost_csv(std::ostream& os, const std::vector<CostRow>& rows) {
  const auto cols = cost_csv_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  auto num = [&](double x) { os << ',' << static_cast<std::uint64_t>(x + 0.5); };
  for (const auto& r : rows) {
    const auto& s = r.strategy;
    os << r.label << ',' << to_string(s.kind) << ',' << r.parallel.tp << ',' << r.parallel.fsdp << ','
       << r.parallel.dp << ',' << s.tree_max_group << ',' << to_string(s.agg_layer_kind) << ','
       << (s.final_layer_tp_split ? 1 : 0) << ',' << r.model.channels << ',' << r.model.embed << ','
       << r.model.depth << ',' << r.model.heads << ',' << r.batch << ',' << r.report.ranks;
    for (Component c : kComponents) {
      const auto& k = r.report[c];
      for (double x : {k.params_bytes, k.activation_bytes, k.grad_bytes, k.optimizer_bytes, k.flops}) num(x);
    }
    num(r.report.memory_bytes());
    num(r.report.totals.flops);
    for (Phase p : {Phase::forward, Phase::backward, Phase::optimizer})
      for (Axis a : {Axis::tp, Axis::fsdp, Axis::dp}) os << ',' << r.report.comm_at(p, a).bytes;
    os << ',' << r.report.budget_bytes << ',' << (r.report.fits ? 1 : 0) << '\n';
  }
}

}  // namespace chag
