#include "chag/parallel/strategies.hpp"

#include <algorithm>
#include <cmath>

#include "chag/parallel/comm.hpp"
#include "chag/tensor/ops.hpp"
#include "chag/tensor/resources.hpp"

namespace chag {

namespace {

struct RankResult {
  double loss = 0.0;
  ParamStore params;
};

// Sub-range of `images` channels [begin, end), or the tensor itself.
Tensor channel_slab(const Tensor& images, std::size_t begin, std::size_t end) {
  if (begin == 0 && end == images.size(1)) return images;
  TagScope scope(tags::tokenize);
  return slice(images, 1, begin, end);
}

// Tokenizer weights of channel slab t. The positional embedding is shared by
// all slabs, so its gradient is summed over the TP group.
TokenizerWeights slab_tokenizer(const ParamStore& params, std::size_t c, std::size_t t, SimTpComm& comm) {
  TokenizerWeights w = tokenizer_weights(params, t * c, (t + 1) * c);
  TagScope scope(tags::tokenize);
  w.pos_embed = comm.copy_in(w.pos_embed, "tokenize.pos_embed");
  return w;
}

Tensor aggregate_on_rank(const StrategyConfig& s, const Architecture& arch, const ParamStore& params,
                         const Tensor& images, SimTpComm& comm) {
  const ModelConfig& m = arch.model;
  const std::size_t C = m.channels, t = comm.index();
  switch (s.kind) {
    case StrategyKind::serial:
      return aggregate_channels(arch, params, images);
    case StrategyKind::tp_only: {
      // Every rank tokenizes all channels.
      Tensor tokens = tokenize_channels(images, tokenizer_weights(params, 0, C), m.patch);
      return flat_aggregate(tokens, params, m.agg_variant, m.heads, comm);
    }
    case StrategyKind::dist_token: {
      const std::size_t c = C / s.tp;
      Tensor local = tokenize_channels(channel_slab(images, t * c, (t + 1) * c),
                                       slab_tokenizer(params, c, t, comm), m.patch);
      Tensor tokens;
      {
        TagScope scope(tags::tokenize);
        tokens = comm.gather(local, 1, "tokenize.gather");
      }
      return flat_aggregate(tokens, params, m.agg_variant, m.heads, comm);
    }
    case StrategyKind::dchag: {
      const std::size_t c = C / s.tp;
      Tensor local = tokenize_channels(channel_slab(images, t * c, (t + 1) * c),
                                       slab_tokenizer(params, c, t, comm), m.patch);
      Tensor stream = tree_aggregate(local, arch.agg.slab_tree(C), arch.agg.layer_kind,
                                     m.agg_variant, m.heads, params, t);
      Tensor gathered;
      {
        TagScope scope(tags::aggregate);
        gathered = comm.gather(stream, 1, "dchag.boundary");
      }
      TpComm& final_comm = s.final_layer_tp_split ? static_cast<TpComm&>(comm) : serial_comm();
      return flat_aggregate(gathered, params, m.agg_variant, m.heads, final_comm,
                            std::string(kFinalAggPrefix), "agg.final");
    }
  }
  throw ConfigError("unknown strategy");
}

// Parameter groups of `params` in first-use order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> groups_of(const ParamStore& params) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::string g = param_group(params.infos()[i].name);
    auto it = std::find_if(out.begin(), out.end(), [&](const auto& e) { return e.first == g; });
    if (it == out.end()) out.push_back({g, {i}});
    else it->second.push_back(i);
  }
  return out;
}

std::size_t padded(std::size_t n, std::size_t parts) { return (n + parts - 1) / parts * parts; }

void fsdp_gather_events(RankContext& ctx, const ParamStore& params) {
  const std::size_t f = ctx.group_size(Axis::fsdp);
  if (f == 1) return;
  for (const auto& [name, idx] : groups_of(params)) {
    std::size_t n = 0;
    for (std::size_t i : idx) n += params.tensors()[i].numel();
    ctx.ledger_only(Axis::fsdp, CollectiveOp::all_gather, {padded(n, f) / f}, "fsdp." + name);
  }
}

// Averages gradients over the fsdp x dp replicas of this TP rank.
void sync_gradients(RankContext& ctx, ParamStore& params) {
  const std::size_t f = ctx.group_size(Axis::fsdp), d = ctx.group_size(Axis::dp);
  if (f * d == 1) return;
  auto groups = groups_of(params);
  std::vector<Tensor> shards;
  for (const auto& [name, idx] : groups) {
    std::vector<double> flat;
    for (std::size_t i : idx) {
      const Tensor& p = params.tensors()[i];
      if (p.has_grad()) flat.insert(flat.end(), p.grad().begin(), p.grad().end());
      else flat.insert(flat.end(), p.numel(), 0.0);
    }
    const std::size_t n = padded(flat.size(), f);
    flat.resize(n, 0.0);
    Tensor g = Tensor::from_vector({n}, std::move(flat));
    if (f > 1) g = ctx.reduce_scatter(Axis::fsdp, g, 0, "fsdp." + name);
    if (d > 1) g = ctx.all_reduce(Axis::dp, g, "dp." + name);
    shards.push_back(g);
  }
  ctx.set_phase(Phase::optimizer);
  const double inv = 1.0 / static_cast<double>(f * d);
  for (std::size_t k = 0; k < groups.size(); ++k) {
    Tensor full = f > 1 ? ctx.all_gather(Axis::fsdp, shards[k], 0, "fsdp." + groups[k].first) : shards[k];
    std::size_t offset = 0;
    for (std::size_t i : groups[k].second) {
      Tensor p = params.tensors()[i];
      std::vector<double> g(full.data().begin() + offset, full.data().begin() + offset + p.numel());
      for (double& x : g) x *= inv;
      p.set_grad(g);
      offset += p.numel();
    }
  }
}

StepOutput execute(const Architecture& arch, const StrategyConfig& s, const ParallelConfig& pc,
                   const ParamStore& master, const std::vector<Batch>& batches,
                   const SchedulerOptions& opts) {
  const auto layout = parameter_layout(arch);
  if (layout.size() != master.size())
    throw ConfigError("master parameters (" + std::to_string(master.size()) +
                      ") do not match the architecture (" + std::to_string(layout.size()) + ")");
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name != master.infos()[i].name || layout[i].shape != master.infos()[i].shape)
      throw ConfigError("master parameter " + master.infos()[i].name + " does not match " +
                        layout[i].name + " " + shape_str(layout[i].shape));

  auto program = [&](RankContext& ctx) {
    const Batch& batch = batches[ctx.coords().dp * pc.fsdp + ctx.coords().fsdp];
    RankResult r;
    r.params = shard_parameters(master, s, ctx.coords().tp);
    SimTpComm comm(ctx);
    ctx.set_phase(Phase::forward);
    fsdp_gather_events(ctx, r.params);
    Tensor aggregated = aggregate_on_rank(s, arch, r.params, batch.images, comm);
    TpComm& head_comm = s.kind == StrategyKind::serial ? serial_comm() : static_cast<TpComm&>(comm);
    Tensor loss = mae_head_loss(aggregated, batch, r.params, arch.model, head_comm);
    aggregated = Tensor();
    r.loss = loss.item();
    ctx.set_phase(Phase::backward);
    fsdp_gather_events(ctx, r.params);
    loss.backward();
    sync_gradients(ctx, r.params);
    return r;
  };
  auto run = spawn_ranks<RankResult>(pc, program, opts);

  StepOutput out;
  std::vector<const ParamStore*> first_group;
  for (std::size_t t = 0; t < pc.tp; ++t) first_group.push_back(&run.results[t].params);
  out.grads = unshard(master, s, first_group, true);
  for (auto& r : run.results) {
    out.rank_loss.push_back(r.loss);
    out.rank_params.push_back(std::move(r.params));
  }
  out.loss = out.rank_loss.front();
  out.ledger = std::move(run.ledger);
  out.stats = std::move(run.stats);
  return out;
}

}  // namespace

StepOutput run_step(const StrategyConfig& s, const ParallelConfig& pc, const ModelConfig& m,
                    const ParamStore& master, const std::vector<Batch>& batches,
                    const SchedulerOptions& opts) {
  pc.validate();
  if (pc.tp != s.tp)
    throw ConfigError("grid tp (" + std::to_string(pc.tp) + ") != strategy tp_degree (" +
                      std::to_string(s.tp) + ")");
  if (batches.size() != pc.fsdp * pc.dp)
    throw ConfigError("expected " + std::to_string(pc.fsdp * pc.dp) + " batches (fsdp x dp), got " +
                      std::to_string(batches.size()));
  const Architecture arch = strategy_architecture(m, s);
  return execute(arch, s, pc, master, batches, opts);
}

StepOutput run_serial_step(const Architecture& arch, const ParamStore& master, const Batch& batch) {
  arch.validate();
  return execute(arch, StrategyConfig{}, ParallelConfig{}, master, {batch}, {});
}

StepOutput run_tp_step(const ParallelConfig& pc, const ModelConfig& m, const ParamStore& master,
                       const Batch& batch, const SchedulerOptions& opts) {
  StrategyConfig s;
  s.kind = StrategyKind::tp_only;
  s.tp = pc.tp;
  return run_step(s, pc, m, master, {batch}, opts);
}

StepOutput run_dist_token_step(const ParallelConfig& pc, const ModelConfig& m,
                               const ParamStore& master, const Batch& batch,
                               const SchedulerOptions& opts) {
  StrategyConfig s;
  s.kind = StrategyKind::dist_token;
  s.tp = pc.tp;
  return run_step(s, pc, m, master, {batch}, opts);
}

StepOutput run_dchag_step(const ParallelConfig& pc, const StrategyConfig& s, const ModelConfig& m,
                          const ParamStore& master, const Batch& batch,
                          const SchedulerOptions& opts) {
  if (s.kind != StrategyKind::dchag) throw ConfigError("run_dchag_step needs a dchag strategy");
  return run_step(s, pc, m, master, {batch}, opts);
}

StepOutput run_hybrid_step(const ParallelConfig& pc, const StrategyConfig& s, const ModelConfig& m,
                           const ParamStore& master, const std::vector<Batch>& batches,
                           const SchedulerOptions& opts) {
  return run_step(s, pc, m, master, batches, opts);
}

double max_grad_rel_diff(const GradMap& a, const GradMap& reference) {
  double scale = 0.0;
  for (const auto& [name, ref] : reference)
    for (double x : ref) scale = std::max(scale, std::abs(x));
  const double floor = 1e-4 * scale;
  double worst = 0.0;
  for (const auto& [name, ref] : reference) {
    auto it = a.find(name);
    if (it == a.end() || it->second.size() != ref.size()) return INFINITY;
    double num = 0.0, den = floor;
    for (std::size_t i = 0; i < ref.size(); ++i) {
      num = std::max(num, std::abs(it->second[i] - ref[i]));
      den = std::max(den, std::abs(ref[i]));
    }
    worst = std::max(worst, den > 0.0 ? num / den : num);
  }
  return worst;
}

}  // namespace chag
