#include "chag/model/model.hpp"

#include <algorithm>
#include <cmath>

#include "chag/tensor/ops.hpp"
#include "chag/tensor/resources.hpp"

namespace chag {

Batch concat_batches(const Batch& a, const Batch& b) {
  Batch out;
  out.images = concat({a.images, b.images}, 0);
  out.metadata = concat({a.metadata, b.metadata}, 0);
  out.mask = a.mask;
  out.mask.insert(out.mask.end(), b.mask.begin(), b.mask.end());
  return out;
}

std::size_t masked_count(std::size_t spatial_tokens, double mask_ratio) {
  auto n = static_cast<std::size_t>(std::lround(mask_ratio * static_cast<double>(spatial_tokens)));
  return std::clamp<std::size_t>(n, 1, spatial_tokens);
}

std::vector<std::uint8_t> sample_mask(RngState& rng, std::size_t batch, std::size_t S,
                                      double mask_ratio) {
  const std::size_t k = masked_count(S, mask_ratio);
  std::vector<std::uint8_t> mask(batch * S, 0);
  std::vector<std::size_t> idx(S);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s < S; ++s) idx[s] = s;
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t j = i + static_cast<std::size_t>(rng.below(S - i));
      std::swap(idx[i], idx[j]);
      mask[b * S + idx[i]] = 1;
    }
  }
  return mask;
}

TokenizerWeights tokenizer_weights(const ParamStore& p, std::size_t begin, std::size_t end) {
  TagScope scope(tags::tokenize);
  auto rows = [&](const char* name) {
    const Tensor& t = p.get(name);
    if (t.size(0) == end - begin) return t;
    return slice(t, 0, begin, end);
  };
  return {rows("tok.weight"), rows("tok.bias"), rows("tok.channel_embed"), p.get("tok.pos_embed")};
}

Tensor tokenize_channels(const Tensor& images, const TokenizerWeights& w, std::size_t patch) {
  TagScope scope(tags::tokenize);
  if (images.dim() != 4) throw ConfigError("images must be [B, C, H, W], got " + shape_str(images.shape()));
  const std::size_t B = images.size(0), c = images.size(1);
  const std::size_t S = (images.size(2) / patch) * (images.size(3) / patch);
  const std::size_t P2 = patch * patch;
  if (w.weight.dim() != 3 || w.weight.size(0) != c || w.weight.size(1) != P2)
    throw ConfigError("tokenizer weight " + shape_str(w.weight.shape()) + " does not match " +
                      std::to_string(c) + " channels with patch " + std::to_string(patch));
  const std::size_t D = w.weight.size(2);
  if (w.pos_embed.shape() != Shape{S, D})
    throw ConfigError("pos_embed " + shape_str(w.pos_embed.shape()) + " does not match S=" +
                      std::to_string(S) + ", D=" + std::to_string(D));

  Tensor patches = permute(unfold_patches(images, patch), {1, 0, 2, 3});  // [c, B, S, P2]
  Tensor t = bmm(reshape(patches, {c, B * S, P2}), w.weight);            // [c, B*S, D]
  t = reshape(t, {c, B, S, D});
  t = add(t, reshape(w.bias, {c, 1, 1, D}));
  t = add(t, reshape(w.channel_embed, {c, 1, 1, D}));
  t = add(t, w.pos_embed);
  return permute(t, {1, 0, 2, 3});
}

namespace {

// [B, G, S, D] -> [B*S, G, D]
Tensor channels_inner(const Tensor& tokens) {
  const std::size_t B = tokens.size(0), G = tokens.size(1), S = tokens.size(2), D = tokens.size(3);
  return reshape(permute(tokens, {0, 2, 1, 3}), {B * S, G, D});
}

}  // namespace

Tensor flat_aggregate(const Tensor& tokens, const ParamStore& params, AggVariant variant,
                      std::size_t heads, TpComm& comm, const std::string& prefix,
                      const std::string& tag) {
  TagScope scope(tags::aggregate);
  if (tokens.dim() != 4) throw DimensionError("flat_aggregate expects [B, G, S, D]");
  const std::size_t B = tokens.size(0), S = tokens.size(2), D = tokens.size(3);
  Tensor out = aggregation_layer(channels_inner(tokens), params, prefix, variant, heads, comm, tag);
  return reshape(out, {B, 1, S, D});
}

Tensor tree_aggregate(const Tensor& tokens, const TreeSpec& spec, AggLayerKind kind,
                      AggVariant variant, std::size_t heads, const ParamStore& params,
                      std::size_t slab) {
  TagScope scope(tags::aggregate);
  if (tokens.dim() != 4) throw DimensionError("tree_aggregate expects [B, c, S, D]");
  spec.validate(tokens.size(1));
  const std::size_t B = tokens.size(0), S = tokens.size(2), D = tokens.size(3);
  Tensor x = channels_inner(tokens);
  for (std::size_t l = 0; l < spec.levels.size(); ++l) {
    const auto& groups = spec.levels[l];
    std::vector<Tensor> outs;
    std::size_t offset = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
      Tensor part = groups.size() == 1 ? x : slice(x, 1, offset, offset + groups[g]);
      offset += groups[g];
      std::string pre = slab_node_prefix(slab, l, g);
      outs.push_back(kind == AggLayerKind::linear
                         ? linear_mix_node(part, params, pre)
                         : aggregation_layer(part, params, pre, variant, heads, serial_comm(),
                                             pre.substr(0, pre.size() - 1)));
    }
    x = outs.size() == 1 ? outs[0] : concat(outs, 1);
  }
  return reshape(x, {B, 1, S, D});
}

Tensor aggregate_channels(const Architecture& arch, const ParamStore& params, const Tensor& images) {
  const ModelConfig& m = arch.model;
  const std::size_t C = m.channels;
  if (arch.agg.kind == AggregationPlan::Kind::flat) {
    Tensor tokens = tokenize_channels(images, tokenizer_weights(params, 0, C), m.patch);
    return flat_aggregate(tokens, params, m.agg_variant, m.heads);
  }
  const std::size_t c = arch.agg.slab_channels(C);
  const TreeSpec spec = arch.agg.slab_tree(C);
  std::vector<Tensor> streams;
  for (std::size_t r = 0; r < arch.agg.slabs; ++r) {
    Tensor slab_images;
    {
      TagScope scope(tags::tokenize);
      slab_images = arch.agg.slabs == 1 ? images : slice(images, 1, r * c, (r + 1) * c);
    }
    Tensor tokens = tokenize_channels(slab_images, tokenizer_weights(params, r * c, (r + 1) * c), m.patch);
    streams.push_back(tree_aggregate(tokens, spec, arch.agg.layer_kind, m.agg_variant, m.heads, params, r));
  }
  Tensor gathered;
  {
    TagScope scope(tags::aggregate);
    gathered = streams.size() == 1 ? streams[0] : concat(streams, 1);
  }
  return flat_aggregate(gathered, params, m.agg_variant, m.heads, serial_comm(),
                        std::string(kFinalAggPrefix), "agg.final");
}

Tensor vit_forward(const Tensor& tokens, const Tensor& metadata, const ParamStore& params,
                   const ModelConfig& cfg, TpComm& comm) {
  TagScope scope(tags::vit);
  if (tokens.dim() != 4 || tokens.size(1) != 1)
    throw DimensionError("vit_forward expects aggregated tokens [B, 1, S, D], got " +
                         shape_str(tokens.shape()));
  const std::size_t B = tokens.size(0), S = tokens.size(2), D = tokens.size(3);
  Tensor meta = reshape(linear(metadata, params.get("meta.weight"), params.get("meta.bias")), {B, 1, D});
  Tensor x = concat({meta, reshape(tokens, {B, S, D})}, 1);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    std::string pre = vit_block_prefix(i);
    x = transformer_block(x, params, pre, cfg.heads, comm, pre.substr(0, pre.size() - 1));
  }
  return x;
}

Tensor patch_targets(const Tensor& images, std::size_t patch) {
  TagScope scope(tags::other);
  NoGradGuard no_grad;
  Tensor p = permute(unfold_patches(images, patch), {0, 2, 1, 3});  // [B, S, C, P2]
  return reshape(p, {p.size(0), p.size(1), p.size(2) * p.size(3)});
}

Tensor decoder_forward(const Tensor& encoded, const ParamStore& params, const ModelConfig& cfg) {
  TagScope scope(tags::decoder);
  const std::size_t S = encoded.size(1) - 1;
  Tensor x = slice(encoded, 1, 1, S + 1);
  x = add(linear(x, params.get("dec.embed.weight"), params.get("dec.embed.bias")),
          params.get("dec.pos_embed"));
  for (std::size_t i = 0; i < cfg.decoder_depth; ++i) {
    std::string pre = dec_block_prefix(i);
    x = transformer_block(x, params, pre, cfg.decoder_heads, serial_comm(), pre.substr(0, pre.size() - 1));
  }
  x = layernorm(x, params.get("dec.norm.gamma"), params.get("dec.norm.beta"));
  return linear(x, params.get("dec.head.weight"), params.get("dec.head.bias"));
}

Tensor mae_head_loss(const Tensor& aggregated, const Batch& batch, const ParamStore& params,
                     const ModelConfig& cfg, TpComm& comm) {
  const std::size_t B = aggregated.size(0), S = aggregated.size(2), D = aggregated.size(3);
  if (batch.mask.size() != B * S)
    throw ConfigError("mask has " + std::to_string(batch.mask.size()) + " entries, expected " +
                      std::to_string(B * S));
  Tensor masked;
  {
    TagScope scope(tags::vit);
    masked = reshape(mask_replace(reshape(aggregated, {B, S, D}), params.get("mask_token"), batch.mask),
                     {B, 1, S, D});
  }
  Tensor encoded = vit_forward(masked, batch.metadata, params, cfg, comm);
  Tensor target = patch_targets(batch.images, cfg.patch);
  Tensor pred = decoder_forward(encoded, params, cfg);
  TagScope scope(tags::decoder);
  return masked_mse(pred, target, batch.mask);
}

Tensor mae_loss(const Architecture& arch, const ParamStore& params, const Batch& batch) {
  return mae_head_loss(aggregate_channels(arch, params, batch.images), batch, params, arch.model);
}

}  // namespace chag
