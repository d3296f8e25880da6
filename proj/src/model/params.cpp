#include "chag/model/params.hpp"

#include <deque>

#include "chag/tensor/resources.hpp"
#include "chag/tensor/rng.hpp"

namespace chag {

void ParamStore::add(ParamInfo info, Tensor value) {
  if (index_.count(info.name)) throw ConfigError("duplicate parameter " + info.name);
  if (value.shape() != info.shape)
    throw ConfigError("parameter " + info.name + " has shape " + shape_str(value.shape()) +
                      ", expected " + shape_str(info.shape));
  index_.emplace(info.name, tensors_.size());
  infos_.push_back(std::move(info));
  tensors_.push_back(std::move(value));
}

bool ParamStore::contains(std::string_view name) const {
  return index_.count(std::string(name)) != 0;
}

const Tensor& ParamStore::get(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("missing parameter " + std::string(name));
  return tensors_[it->second];
}

const ParamInfo& ParamStore::info(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) throw ConfigError("missing parameter " + std::string(name));
  return infos_[it->second];
}

std::size_t ParamStore::numel() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& t : tensors_) t.zero_grad();
}

std::string slab_node_prefix(std::size_t slab, std::size_t level, std::size_t node) {
  return "agg.slab" + std::to_string(slab) + ".l" + std::to_string(level) + ".n" +
         std::to_string(node) + ".";
}

std::string vit_block_prefix(std::size_t i) { return "vit.block" + std::to_string(i) + "."; }
std::string dec_block_prefix(std::size_t i) { return "dec.block" + std::to_string(i) + "."; }

namespace {

struct LayoutBuilder {
  // deque keeps references from add() valid while more entries are appended
  std::deque<ParamInfo> out;

  ParamInfo& add(std::string name, Shape shape, std::string_view component,
                 ParamInit init = ParamInit::trunc_normal) {
    ParamInfo p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.component = std::string(component);
    p.init = init;
    if (init == ParamInit::ones) p.init_value = 1.0;
    out.push_back(std::move(p));
    return out.back();
  }
  ParamInfo& split(ParamInfo& p, std::size_t axis) {
    p.shard = ShardKind::tp_split;
    p.axis = axis;
    return p;
  }

  // Query/key/value/output projections; `splittable` marks head-split params.
  void attention(const std::string& pre, std::size_t d, std::string_view comp, bool splittable,
                 bool with_query_proj) {
    auto tp = [&](ParamInfo& p, std::size_t axis) {
      if (splittable) split(p, axis);
    };
    if (with_query_proj) {
      tp(add(pre + "wq", {d, d}, comp), 1);
      tp(add(pre + "bq", {d}, comp, ParamInit::zeros), 0);
    }
    tp(add(pre + "wk", {d, d}, comp), 1);
    tp(add(pre + "bk", {d}, comp, ParamInit::zeros), 0);
    tp(add(pre + "wv", {d, d}, comp), 1);
    tp(add(pre + "bv", {d}, comp, ParamInit::zeros), 0);
    tp(add(pre + "wo", {d, d}, comp), 0);
    add(pre + "bo", {d}, comp, ParamInit::zeros);
  }

  void agg_layer(const std::string& pre, std::size_t d, AggVariant v, bool splittable) {
    auto comp = tags::aggregate;
    if (v == AggVariant::single_query) {
      auto& q = add(pre + "query", {d}, comp);
      if (splittable) split(q, 0);
      attention(pre, d, comp, splittable, false);
    } else {
      attention(pre, d, comp, splittable, true);
      add(pre + "pool", {d}, comp);
    }
  }

  void block(const std::string& pre, std::size_t d, std::size_t hidden, std::string_view comp,
             bool splittable) {
    add(pre + "ln1.gamma", {d}, comp, ParamInit::ones);
    add(pre + "ln1.beta", {d}, comp, ParamInit::zeros);
    attention(pre + "attn.", d, comp, splittable, true);
    add(pre + "ln2.gamma", {d}, comp, ParamInit::ones);
    add(pre + "ln2.beta", {d}, comp, ParamInit::zeros);
    auto& w1 = add(pre + "mlp.w1", {d, hidden}, comp);
    auto& b1 = add(pre + "mlp.b1", {hidden}, comp, ParamInit::zeros);
    auto& w2 = add(pre + "mlp.w2", {hidden, d}, comp);
    if (splittable) {
      split(w1, 1);
      split(b1, 0);
      split(w2, 0);
    }
    add(pre + "mlp.b2", {d}, comp, ParamInit::zeros);
  }
};

}  // namespace

std::vector<ParamInfo> parameter_layout(const Architecture& arch) {
  arch.validate();
  const ModelConfig& m = arch.model;
  const std::size_t C = m.channels, D = m.embed, S = m.spatial_tokens(), P2 = m.patch_area();
  LayoutBuilder b;

  for (auto* p : {&b.add("tok.weight", {C, P2, D}, tags::tokenize),
                  &b.add("tok.bias", {C, D}, tags::tokenize, ParamInit::zeros),
                  &b.add("tok.channel_embed", {C, D}, tags::tokenize)})
    p->shard = ShardKind::channel_slab;
  b.add("tok.pos_embed", {S, D}, tags::tokenize);

  if (arch.agg.kind == AggregationPlan::Kind::flat) {
    b.agg_layer(std::string(kFlatAggPrefix), D, m.agg_variant, true);
  } else {
    TreeSpec spec = arch.agg.slab_tree(C);
    for (std::size_t r = 0; r < arch.agg.slabs; ++r) {
      for (std::size_t l = 0; l < spec.levels.size(); ++l) {
        for (std::size_t g = 0; g < spec.levels[l].size(); ++g) {
          std::string pre = slab_node_prefix(r, l, g);
          std::size_t first = b.out.size();
          if (arch.agg.layer_kind == AggLayerKind::linear) {
            auto& mix = b.add(pre + "mix", {spec.levels[l][g]}, tags::aggregate,
                              ParamInit::constant);
            mix.init_value = 1.0 / static_cast<double>(spec.levels[l][g]);
            b.add(pre + "w", {D, D}, tags::aggregate);
            b.add(pre + "b", {D}, tags::aggregate, ParamInit::zeros);
          } else {
            b.agg_layer(pre, D, m.agg_variant, false);
          }
          for (std::size_t i = first; i < b.out.size(); ++i) {
            b.out[i].shard = ShardKind::slab_owned;
            b.out[i].owner = r;
          }
        }
      }
    }
    std::size_t first = b.out.size();
    b.agg_layer(std::string(kFinalAggPrefix), D, m.agg_variant, true);
    for (std::size_t i = first; i < b.out.size(); ++i) b.out[i].final_layer = true;
  }

  b.add("mask_token", {D}, tags::vit);
  b.add("meta.weight", {kMetadataDim, D}, tags::vit);
  b.add("meta.bias", {D}, tags::vit, ParamInit::zeros);
  for (std::size_t i = 0; i < m.depth; ++i)
    b.block(vit_block_prefix(i), D, m.mlp_hidden(), tags::vit, true);

  const std::size_t Dd = m.decoder_dim;
  b.add("dec.embed.weight", {D, Dd}, tags::decoder);
  b.add("dec.embed.bias", {Dd}, tags::decoder, ParamInit::zeros);
  b.add("dec.pos_embed", {S, Dd}, tags::decoder);
  for (std::size_t i = 0; i < m.decoder_depth; ++i)
    b.block(dec_block_prefix(i), Dd, m.mlp_ratio * Dd, tags::decoder, false);
  b.add("dec.norm.gamma", {Dd}, tags::decoder, ParamInit::ones);
  b.add("dec.norm.beta", {Dd}, tags::decoder, ParamInit::zeros);
  b.add("dec.head.weight", {Dd, C * P2}, tags::decoder);
  b.add("dec.head.bias", {C * P2}, tags::decoder, ParamInit::zeros);
  return {b.out.begin(), b.out.end()};
}

std::uint64_t name_key(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor init_parameter(const ParamInfo& info, std::uint64_t seed) {
  std::size_t n = shape_numel(info.shape);
  std::vector<double> v(n, 0.0);
  switch (info.init) {
    case ParamInit::trunc_normal: {
      RngState rng = RngState(seed).fork(name_key(info.name));
      for (auto& x : v) x = rng.trunc_normal(0.02);
      break;
    }
    case ParamInit::zeros:
      break;
    case ParamInit::ones:
      std::fill(v.begin(), v.end(), 1.0);
      break;
    case ParamInit::constant:
      std::fill(v.begin(), v.end(), info.init_value);
      break;
  }
  return Tensor::from_vector(info.shape, std::move(v), true);
}

ParamStore init_parameters(const Architecture& arch, std::uint64_t seed) {
  ParamStore store;
  for (auto& info : parameter_layout(arch)) {
    Tensor t = init_parameter(info, seed);
    store.add(std::move(info), std::move(t));
  }
  return store;
}

}  // namespace chag
