#include "chag/cost/cost_model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "chag/tensor/tensor.hpp"

namespace chag {

std::string_view to_string(Component c) {
  switch (c) {
    case Component::tokenize: return "tokenize";
    case Component::aggregate: return "aggregate";
    case Component::vit: return "vit";
    case Component::decoder: return "decoder";
  }
  return "?";
}

void HardwareModel::validate() const {
  if (bytes_per_gpu == 0) throw ConfigError("bytes_per_gpu must be positive");
  if (gpus_per_node == 0) throw ConfigError("gpus_per_node must be positive");
}

ComponentCost& ComponentCost::operator+=(const ComponentCost& o) {
  params_bytes += o.params_bytes;
  activation_bytes += o.activation_bytes;
  grad_bytes += o.grad_bytes;
  optimizer_bytes += o.optimizer_bytes;
  forward_flops += o.forward_flops;
  flops += o.flops;
  return *this;
}

double CostReport::channel_stage_bytes() const {
  return (*this)[Component::tokenize].memory_bytes() + (*this)[Component::aggregate].memory_bytes();
}

std::uint64_t CostReport::forward_comm_bytes() const {
  std::uint64_t b = 0;
  for (const auto& cell : comm[static_cast<std::size_t>(Phase::forward)]) b += cell.bytes;
  return b;
}

const std::array<double, 4>& activation_calibration() {
  static const std::array<double, 4> factors = {1.0, 0.84, 0.93, 1.32};
  return factors;
}

namespace {

using Counts = std::array<ComponentCounts, 4>;

ComponentCounts& at(Counts& c, Component k) { return c[static_cast<std::size_t>(k)]; }

// Shapes of one rank. `t` splits heads and projection widths; `sim` marks
// strategies whose TP sums go through the runtime (an extra gathered copy
// even on one rank).
struct Dims {
  double B, C, S, P2, D, h, r, t;
  bool sim;
  double N() const { return B * S; }
};

// Activations and FLOPs of one aggregation layer over [N, G, D] with
// projection width w and local heads hl.
// `work` is the largest set of gradient buffers alive at once while the
// layer runs backward, on top of its stored activations.
struct Layer {
  double acts = 0.0, flops = 0.0, work = 0.0;
};

Layer agg_layer(AggVariant v, double N, double G, double D, double w, double hl, bool sim) {
  const double cx = sim ? 1.0 : 0.0;
  Layer l;
  if (v == AggVariant::single_query) {
    // k, v, broadcast query, attention (1 x G logits), output projection
    l.acts = 4 * N * G * w + 5 * N * w + 2 * N * hl * G + 2 * N * D + cx * N * D;
    l.flops = 4 * N * G * D * w + 4 * N * G * w + 2 * N * w * D;
    l.work = 2 * N * hl * G + 2 * N * G * w + N * G * D;
  } else {
    // q, k, v, attention (G x G logits), output projection, attention pooling
    l.acts = 9 * N * G * w + 2 * N * hl * G * G + 2 * N * G * D + cx * N * G * D + 4 * N * G + N * D;
    l.flops = 6 * N * G * D * w + 4 * N * G * G * w + 2 * N * G * w * D + 4 * N * G * D;
    l.work = 2 * N * hl * G * G + 2 * N * G * w + N * G * D;
  }
  return l;
}

double agg_layer_params(AggVariant v, double D, double split) {
  if (v == AggVariant::single_query) return 3 * D * D / split + 3 * D / split + D;
  return 4 * D * D / split + 3 * D / split + 2 * D;
}

// Pre-norm block over M = B*T rows, attention length T.
Layer block(double B, double T, double D, double w, double hl, double hid, bool sim) {
  const double M = B * T, cx = sim ? 2.0 : 0.0;
  Layer l;
  l.acts = 9 * M * w + 2 * B * hl * T * T + 8 * M * D + 2 * M * hid + cx * M * D;
  l.flops = 6 * M * D * w + 4 * M * T * w + 2 * M * w * D + 4 * M * D * hid;
  l.work = 2 * B * hl * T * T + 2 * M * w + 2 * M * D;
  return l;
}

double block_params(double D, double hid, double split) {
  return 4 * D + 4 * D * D / split + 3 * D / split + D + 2 * D * hid / split + hid / split + D;
}

// One rank's tree over c local channels.
Layer tree(const TreeSpec& spec, AggLayerKind kind, AggVariant v, double N, double D, double h,
           double& params) {
  Layer out;
  out.acts = N * static_cast<double>(spec.inputs()) * D;  // channels-inner permute
  for (const auto& groups : spec.levels) {
    if (groups.size() > 1) {
      double in = 0;
      for (auto g : groups) in += static_cast<double>(g);
      out.acts += N * in * D + N * static_cast<double>(groups.size()) * D;  // slices + concat
    }
    for (auto gs : groups) {
      const double g = static_cast<double>(gs);
      if (kind == AggLayerKind::linear) {
        out.acts += 2 * N * D;
        out.work = std::max(out.work, 2 * N * D + N * g * D);
        out.flops += 2 * N * g * D + 2 * N * D * D;
        params += g + D * D + D;
      } else {
        Layer l = agg_layer(v, N, g, D, D, h, false);
        out.acts += l.acts;
        out.flops += l.flops;
        out.work = std::max(out.work, l.work);
        params += agg_layer_params(v, D, 1);
      }
    }
  }
  return out;
}

}  // namespace

Counts component_counts(const ModelConfig& m, const StrategyConfig& s, std::size_t batch) {
  s.validate(m);
  const bool serial = s.kind == StrategyKind::serial;
  const double t = static_cast<double>(s.tp);
  Dims d{static_cast<double>(batch), static_cast<double>(m.channels),
         static_cast<double>(m.spatial_tokens()), static_cast<double>(m.patch_area()),
         static_cast<double>(m.embed), static_cast<double>(m.heads),
         static_cast<double>(m.mlp_ratio), t, !serial};
  const double N = d.N(), D = d.D, C = d.C, S = d.S, P2 = d.P2;
  const double w = D / t, hl = d.h / t;
  Counts out{};

  // Tokenizer.
  auto& tok = at(out, Component::tokenize);
  const bool slabbed = s.kind == StrategyKind::dist_token || s.kind == StrategyKind::dchag;
  const double c = slabbed ? C / t : C;
  tok.params = c * P2 * D + 2 * c * D + S * D;
  // Stored: permuted patches and five [c, B, S, D] token tensors; the unfolded
  // images and the channel slab need no gradient and are released.
  tok.stored = c * N * P2 + 5 * c * N * D;
  tok.forward_flops = 2 * c * N * P2 * D;
  if (s.kind == StrategyKind::dist_token) {
    tok.stored += C * N * D;  // gathered tokens
    tok.working = C * N * D + c * N * D;
  } else {
    tok.working = 2 * c * N * D;
  }

  // Channel aggregation.
  auto& agg = at(out, Component::aggregate);
  if (s.kind != StrategyKind::dchag) {
    Layer l = agg_layer(m.agg_variant, N, C, D, w, hl, d.sim);
    agg.stored = N * C * D + l.acts;
    agg.working = l.work;
    agg.forward_flops = l.flops;
    agg.params = agg_layer_params(m.agg_variant, D, t);
  } else {
    const Architecture arch = strategy_architecture(m, s);
    double params = 0;
    Layer tr = tree(arch.agg.slab_tree(m.channels), s.agg_layer_kind, m.agg_variant, N, D, d.h, params);
    const double split = s.final_layer_tp_split ? t : 1.0;
    Layer fin = agg_layer(m.agg_variant, N, t, D, D / split, d.h / split, s.final_layer_tp_split);
    // tree, gathered streams, channels-inner permute, final layer
    agg.stored = tr.acts + 2 * N * t * D + fin.acts;
    agg.working = std::max(tr.work, fin.work);
    agg.forward_flops = tr.flops + fin.flops;
    agg.params = params + agg_layer_params(m.agg_variant, D, split);
  }

  // ViT encoder with the metadata token prepended.
  auto& vit = at(out, Component::vit);
  const double T = S + 1, hid = d.r * D;
  vit.stored = N * D + d.B * D + d.B * T * D;  // mask replace, metadata, concat
  vit.forward_flops = 2 * d.B * kMetadataDim * D;
  vit.params = D + kMetadataDim * D + D;
  for (std::size_t i = 0; i < m.depth; ++i) {
    Layer l = block(d.B, T, D, w, hl, hid / t, d.sim);
    vit.stored += l.acts;
    vit.working = l.work;
    vit.forward_flops += l.flops;
    vit.params += block_params(D, hid, t);
  }

  // Decoder, never split.
  auto& dec = at(out, Component::decoder);
  const double Dd = static_cast<double>(m.decoder_dim), hd = static_cast<double>(m.decoder_heads);
  const double out_w = C * P2;
  dec.stored = N * D + 2 * N * Dd + N * Dd + N * out_w + 1;  // slice, embed+pos, norm, head, loss
  dec.working = N * out_w + N * Dd;  // prediction and head-input gradients
  dec.forward_flops = 2 * N * D * Dd + 2 * N * Dd * out_w;
  dec.params = D * Dd + Dd + S * Dd + 2 * Dd + Dd * out_w + out_w;
  for (std::size_t i = 0; i < m.decoder_depth; ++i) {
    Layer l = block(d.B, S, Dd, Dd, hd, d.r * Dd, false);
    dec.stored += l.acts;
    dec.working = std::max(dec.working, l.work);
    dec.forward_flops += l.flops;
    dec.params += block_params(Dd, d.r * Dd, 1);
  }
  for (auto& k : out) k.activations = k.stored + k.working;
  return out;
}

std::vector<std::pair<std::string, double>> group_param_counts(const ModelConfig& m,
                                                               const StrategyConfig& s) {
  const Counts c = component_counts(m, s, 1);
  const double D = static_cast<double>(m.embed);
  const double t = s.kind == StrategyKind::serial ? 1.0 : static_cast<double>(s.tp);
  std::vector<std::pair<std::string, double>> out;
  out.emplace_back("tokenize", c[0].params);
  out.emplace_back("aggregate", c[1].params);
  out.emplace_back("vit.embed", D + kMetadataDim * D + D);
  for (std::size_t i = 0; i < m.depth; ++i)
    out.emplace_back("vit.block" + std::to_string(i),
                     block_params(D, static_cast<double>(m.mlp_hidden()), t));
  out.emplace_back("decoder", c[3].params);
  return out;
}

namespace {

std::uint64_t payload(CollectiveOp op, double numel, std::size_t g, std::size_t precision) {
  const std::uint64_t b = ring_payload_bytes(op, static_cast<std::size_t>(numel), g);
  return b / 8 * precision + (b % 8) * precision / 8;
}

struct CommBuilder {
  CostReport& r;
  std::size_t precision;

  void add(Phase p, Axis a, CollectiveOp op, double numel, std::size_t g) {
    auto& cell = r.comm[static_cast<std::size_t>(p)][static_cast<std::size_t>(a)];
    cell.bytes += payload(op, numel, g, precision);
    ++cell.events;
  }
  // ReduceScatter then AllGather along the last axis.
  void group_sum(Phase p, double n, std::size_t t) {
    add(p, Axis::tp, CollectiveOp::reduce_scatter, n, t);
    add(p, Axis::tp, CollectiveOp::all_gather, n / static_cast<double>(t), t);
  }
};

double padded_shard(double n, std::size_t f) {
  const double fd = static_cast<double>(f);
  return std::ceil(n / fd);
}

}  // namespace

CostReport estimate(const ModelConfig& m, const StrategyConfig& s, const ParallelConfig& pc,
                    const HardwareModel& hw, std::size_t precision_bytes, std::size_t batch) {
  hw.validate();
  pc.validate();
  if (pc.tp != s.tp)
    throw ConfigError("grid tp (" + std::to_string(pc.tp) + ") != strategy tp_degree (" +
                      std::to_string(s.tp) + ")");
  if (precision_bytes == 0) throw ConfigError("precision_bytes must be positive");
  if (batch == 0) throw ConfigError("batch must be positive");
  const Counts counts = component_counts(m, s, batch);
  const auto& calib = activation_calibration();
  const double p = static_cast<double>(precision_bytes), f = static_cast<double>(pc.fsdp);

  CostReport r;
  r.ranks = pc.ranks();
  r.budget_bytes = hw.bytes_per_gpu;
  for (std::size_t i = 0; i < counts.size(); ++i) {
    auto& c = r.components[i];
    c.params_bytes = std::ceil(counts[i].params / f) * p;
    c.grad_bytes = c.params_bytes;
    c.optimizer_bytes = 2 * c.params_bytes;
    c.activation_bytes = counts[i].activations * p * calib[i];
    c.forward_flops = counts[i].forward_flops;
    c.flops = 3 * c.forward_flops;
    r.totals += c;
  }

  // Collectives, mirroring the strategy's call sequence on one rank.
  CommBuilder cb{r, precision_bytes};
  const std::size_t t = s.tp;
  const double B = static_cast<double>(batch), S = static_cast<double>(m.spatial_tokens());
  const double D = static_cast<double>(m.embed), C = static_cast<double>(m.channels);
  const double N = B * S, M = B * (S + 1);
  const bool full = m.agg_variant == AggVariant::full_cross;
  if (s.kind != StrategyKind::serial) {
    const double td = static_cast<double>(t);
    if (s.kind == StrategyKind::dist_token || s.kind == StrategyKind::dchag)
      cb.group_sum(Phase::backward, S * D, t);  // shared positional embedding
    if (s.kind == StrategyKind::dist_token)
      cb.add(Phase::forward, Axis::tp, CollectiveOp::all_gather, N * C / td * D, t);
    if (s.kind == StrategyKind::dchag) {
      cb.add(Phase::forward, Axis::tp, CollectiveOp::all_gather, N * D, t);
      if (s.final_layer_tp_split) {
        cb.group_sum(Phase::forward, full ? N * td * D : N * D, t);
        cb.group_sum(Phase::backward, N * td * D, t);
      }
    } else {
      cb.group_sum(Phase::forward, full ? N * C * D : N * D, t);
      cb.group_sum(Phase::backward, N * C * D, t);
    }
    for (std::size_t i = 0; i < 2 * m.depth; ++i) {
      cb.group_sum(Phase::forward, M * D, t);
      cb.group_sum(Phase::backward, M * D, t);
    }
  }
  if (pc.fsdp * pc.dp > 1) {
    for (const auto& [name, n] : group_param_counts(m, s)) {
      const double shard = padded_shard(n, pc.fsdp);
      if (pc.fsdp > 1) {
        cb.add(Phase::forward, Axis::fsdp, CollectiveOp::all_gather, shard, pc.fsdp);
        cb.add(Phase::backward, Axis::fsdp, CollectiveOp::all_gather, shard, pc.fsdp);
        cb.add(Phase::backward, Axis::fsdp, CollectiveOp::reduce_scatter, shard * f, pc.fsdp);
        cb.add(Phase::optimizer, Axis::fsdp, CollectiveOp::all_gather, shard, pc.fsdp);
      }
      if (pc.dp > 1) cb.add(Phase::backward, Axis::dp, CollectiveOp::all_reduce, shard, pc.dp);
    }
  }

  r.fits = r.totals.memory_bytes() <= static_cast<double>(hw.bytes_per_gpu);
  return r;
}

}  // namespace chag
