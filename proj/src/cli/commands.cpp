#include "chag/cli/commands.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "chag/cli/verify.hpp"
#include "chag/cost/planner.hpp"
#include "chag/model/optimizer.hpp"
#include "chag/model/synthetic.hpp"
#include "chag/parallel/strategies.hpp"
#include "chag/parallel/weights_io.hpp"

namespace chag {

namespace fs = std::filesystem;

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag, const RunConfig& c) {
  if (flag) return *flag;
  if (c.seed) return *c.seed;
  if (const char* env = std::getenv("CHAG_SEED"); env && *env) {
    std::uint64_t v = 0;
    const std::string s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("CHAG_SEED must be a non-negative integer, got '" + s + "'");
    return v;
  }
  return 0;
}

TrainResult train_model(const RunConfig& c, std::uint64_t seed, std::size_t steps) {
  c.validate();
  if (steps == 0) throw ConfigError("steps must be >= 1");
  const Architecture arch = strategy_architecture(c.model, c.strategy);
  TrainResult result;
  result.params = init_parameters(arch, seed);
  SyntheticDataset data(c.model, seed + 1);
  Adam adam(AdamConfig{.lr = c.lr});
  const std::size_t replicas = c.parallel.fsdp * c.parallel.dp;
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<Batch> batches;
    for (std::size_t i = 0; i < replicas; ++i)
      batches.push_back(data.batch((step * replicas + i) * c.batch, c.batch));
    StepOutput out = run_step(c.strategy, c.parallel, c.model, result.params, batches);
    double loss = 0.0;
    for (std::size_t dp = 0; dp < c.parallel.dp; ++dp)
      for (std::size_t f = 0; f < c.parallel.fsdp; ++f)
        loss += out.rank_loss[rank_of({0, f, dp}, c.parallel)];
    result.losses.push_back(loss / static_cast<double>(replicas));
    for (std::size_t i = 0; i < result.params.size(); ++i) {
      Tensor p = result.params.tensors()[i];
      p.set_grad(out.grads.at(result.params.infos()[i].name));
    }
    adam.step(result.params);
    if (step == 0) {
      result.first_step_ledger = std::move(out.ledger);
      result.first_step_stats = out.stats.at(0);
    }
  }
  return result;
}

namespace {

std::string shortest(double x) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, p);
}

}  // namespace

void write_loss_csv(std::ostream& os, const std::vector<double>& losses) {
  os << "step,loss\n";
  for (std::size_t i = 0; i < losses.size(); ++i) os << i + 1 << ',' << shortest(losses[i]) << '\n';
}

void write_file_atomic(const std::string& path, const std::string& text) {
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << text;
    if (!out.flush()) throw std::runtime_error("failed writing " + tmp.string());
  }
  fs::rename(tmp, target);
}

namespace {

using json = nlohmann::ordered_json;

// CSV to `out_dir/name` when an output directory is set, else to stdout.
void emit(const CliOptions& opts, std::ostream& out, const std::string& name, const std::string& text) {
  if (opts.out_dir.empty()) {
    out << text;
    return;
  }
  const std::string path = (fs::path(opts.out_dir) / name).string();
  write_file_atomic(path, text);
  out << "wrote " << path << '\n';
}

json ledger_summary(const CommLedger& ledger) {
  json j = json::object();
  const auto all = ledger.query();
  j["events"] = all.events;
  j["payload_bytes"] = all.bytes;
  for (Phase p : {Phase::forward, Phase::backward, Phase::optimizer})
    for (Axis a : {Axis::tp, Axis::fsdp, Axis::dp}) {
      const auto t = ledger.query({.phase = p, .axis = a});
      if (t.events == 0) continue;
      j[std::string(to_string(p)) + "." + std::string(to_string(a))] = {{"events", t.events},
                                                                          {"payload_bytes", t.bytes}};
    }
  return j;
}

json alloc_summary(const ResourceStats& s) {
  json tags = json::object();
  for (const auto& [tag, bytes] : s.alloc.per_tag_peak) tags[tag] = bytes;
  json flops = json::object();
  for (const auto& [tag, n] : s.flops) flops[tag] = n;
  return {{"peak_bytes", s.alloc.peak_bytes}, {"per_tag_peak", tags}, {"forward_flops", flops}};
}

std::string report_csv(const RunConfig& c, const std::string& label, const StrategyConfig& s,
                       const ParallelConfig& pc, const CostReport& r) {
  std::ostringstream os;
  write_cost_csv(os, {CostRow{label, c.model, s, pc, c.batch, r}});
  return os.str();
}

PlanRequest plan_request(const RunConfig& c) {
  PlanRequest req;
  req.model = c.model;
  req.kind = c.strategy.kind;
  req.layer_kind = c.strategy.agg_layer_kind;
  req.final_layer_tp_split = c.strategy.final_layer_tp_split;
  req.hw = c.hw;
  req.precision_bytes = c.precision_bytes;
  req.batch = c.batch;
  req.rank_limit = c.rank_limit;
  return req;
}

std::string describe(const StrategyConfig& s, const ParallelConfig& pc) {
  std::ostringstream os;
  os << to_string(s.kind) << " tp=" << pc.tp << " fsdp=" << pc.fsdp << " dp=" << pc.dp;
  if (s.kind == StrategyKind::dchag)
    os << " max_group=" << s.tree_max_group << " layer=" << to_string(s.agg_layer_kind);
  return os.str();
}

int cmd_train(const CliOptions& opts, RunConfig c, std::ostream& out, std::ostream& err) {
  const std::uint64_t seed = resolve_seed(opts.seed, c);
  c.seed = seed;
  if (opts.steps) c.steps = *opts.steps;
  if (c.steps == 0) throw ConfigError("steps must be >= 1");
  CostReport cost = estimate(c.model, c.strategy, c.parallel, c.hw, sizeof(double), c.batch);
  if (!cost.fits) {
    PlanRequest req = plan_request(c);
    req.precision_bytes = sizeof(double);
    PlanResult p = plan(req);
    err << "configuration needs " << static_cast<std::uint64_t>(cost.memory_bytes()) << " bytes per rank, budget "
        << c.hw.bytes_per_gpu << '\n';
    if (p.feasible)
      err << "suggestion: " << describe(p.strategy, p.parallel) << " (" << p.parallel.ranks() << " ranks)\n";
    else
      err << "infeasible within rank limit\n";
    return exit_code::failed;
  }
  TrainResult r = train_model(c, seed, c.steps);
  std::ostringstream loss_csv, ledger_csv, weights_csv;
  write_loss_csv(loss_csv, r.losses);
  r.first_step_ledger.write_csv(ledger_csv);
  write_weights_csv(weights_csv, r.params);
  out << "step 1 loss " << shortest(r.losses.front()) << ", step " << r.losses.size() << " loss "
      << shortest(r.losses.back()) << '\n';
  if (opts.out_dir.empty()) {
    write_loss_csv(out, r.losses);
    return exit_code::ok;
  }
  const fs::path dir(opts.out_dir);
  const std::string config_text = to_config_text(c);
  json artifacts = {{"loss_csv", "loss.csv"},
                    {"ledger_csv", "ledger.csv"},
                    {"weights_csv", "weights.csv"},
                    {"config", "config.txt"}};
  json config = json::object();
  for (const auto& [k, v] : parse_config_text(config_text)) config[k] = v;
  json manifest = {{"tool", "chag"},
                   {"version", kToolVersion},
                   {"command", "train"},
                   {"seed", seed},
                   {"steps", c.steps},
                   {"config", config},
                   {"losses", r.losses},
                   {"ledger_summary", ledger_summary(r.first_step_ledger)},
                   {"alloc_summary", alloc_summary(r.first_step_stats)},
                   {"artifacts", artifacts}};
  write_file_atomic((dir / "loss.csv").string(), loss_csv.str());
  write_file_atomic((dir / "ledger.csv").string(), ledger_csv.str());
  write_file_atomic((dir / "weights.csv").string(), weights_csv.str());
  write_file_atomic((dir / "config.txt").string(), config_text);
  write_file_atomic((dir / "manifest.json").string(), manifest.dump(2) + "\n");
  out << "wrote " << (dir / "manifest.json").string() << '\n';
  return exit_code::ok;
}

int cmd_cost(const CliOptions& opts, const RunConfig& c, std::ostream& out) {
  CostReport r = estimate(c.model, c.strategy, c.parallel, c.hw, c.precision_bytes, c.batch);
  emit(opts, out, "cost.csv", report_csv(c, std::string(to_string(c.strategy.kind)), c.strategy, c.parallel, r));
  return exit_code::ok;
}

int cmd_plan(const CliOptions& opts, const RunConfig& c, std::ostream& out, std::ostream& err) {
  PlanResult p = plan(plan_request(c));
  if (!p.feasible) {
    err << "infeasible within rank limit (" << c.rank_limit << " ranks, " << p.candidates
        << " configurations, budget " << c.hw.bytes_per_gpu << " bytes)\n";
    return exit_code::failed;
  }
  out << "plan: " << p.parallel.ranks() << " ranks, " << describe(p.strategy, p.parallel) << ", "
      << static_cast<std::uint64_t>(p.report.memory_bytes()) << " of " << c.hw.bytes_per_gpu
      << " bytes per rank, " << p.candidates << " configurations evaluated\n";
  emit(opts, out, "plan.csv", report_csv(c, "plan", p.strategy, p.parallel, p.report));
  return exit_code::ok;
}

int cmd_sweep(const CliOptions& opts, RunConfig c, std::ostream& out) {
  if (opts.axis) c.sweep_axis = parse_sweep_axis(*opts.axis);
  if (!opts.values.empty()) c.sweep_values = opts.values;
  if (c.sweep_values.empty()) throw ConfigError("sweep needs values (--values or sweep_values)");
  std::vector<SweepStrategy> strategies;
  for (const auto& label : c.sweep_strategies) {
    StrategyConfig s = named_strategy(label, c.strategy);
    strategies.push_back({label, s, {s.tp, c.parallel.fsdp, c.parallel.dp}});
  }
  std::ostringstream os;
  write_cost_csv(os, sweep(c.model, c.sweep_axis, c.sweep_values, strategies, c.hw, c.precision_bytes, c.batch));
  emit(opts, out, "sweep.csv", os.str());
  return exit_code::ok;
}

int cmd_ledger_dump(const CliOptions& opts, const RunConfig& c, std::ostream& out) {
  const std::uint64_t seed = resolve_seed(opts.seed, c);
  ParamStore master = init_parameters(strategy_architecture(c.model, c.strategy), seed);
  SyntheticDataset data(c.model, seed + 1);
  std::vector<Batch> batches;
  for (std::size_t i = 0; i < c.parallel.fsdp * c.parallel.dp; ++i)
    batches.push_back(data.batch(i * c.batch, c.batch));
  StepOutput step = run_step(c.strategy, c.parallel, c.model, master, batches);
  std::ostringstream os;
  step.ledger.write_csv(os);
  emit(opts, out, "ledger.csv", os.str());
  return exit_code::ok;
}

int cmd_verify(const CliOptions& opts, const RunConfig& c, std::ostream& out) {
  const std::string& s = opts.suite;
  if (s != "grad" && s != "equiv" && s != "comm" && s != "cost")
    throw ConfigError("unknown verify suite '" + s + "' (expected grad, equiv, comm or cost)");
  auto checks = run_suite(s, c, resolve_seed(opts.seed, c));
  print_checks(out, checks);
  return all_pass(checks) ? exit_code::ok : exit_code::failed;
}

}  // namespace

int run_command(const CliOptions& opts, std::ostream& out, std::ostream& err) {
  RunConfig c;
  try {
    if (opts.config_path.empty()) throw ConfigError("--config is required");
    c = load_run_config(opts.config_path);
    if (opts.budget) c.hw.bytes_per_gpu = *opts.budget;
    c.validate();
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::bad_config;
  }
  try {
    if (opts.command == "train") return cmd_train(opts, c, out, err);
    if (opts.command == "cost") return cmd_cost(opts, c, out);
    if (opts.command == "plan") return cmd_plan(opts, c, out, err);
    if (opts.command == "sweep") return cmd_sweep(opts, c, out);
    if (opts.command == "ledger-dump") return cmd_ledger_dump(opts, c, out);
    if (opts.command == "verify") return cmd_verify(opts, c, out);
    err << "unknown command '" << opts.command << "'\n";
    return exit_code::bad_config;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return exit_code::bad_config;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code::failed;
  }
}

}  // namespace chag
