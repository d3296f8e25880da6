#include "chag/parallel/sharding.hpp"

#include "chag/tensor/resources.hpp"

namespace chag {

std::string_view to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::serial: return "serial";
    case StrategyKind::tp_only: return "tp_only";
    case StrategyKind::dist_token: return "dist_token";
    case StrategyKind::dchag: return "dchag";
  }
  return "?";
}

StrategyKind parse_strategy_kind(std::string_view s) {
  if (s == "serial") return StrategyKind::serial;
  if (s == "tp_only" || s == "tp") return StrategyKind::tp_only;
  if (s == "dist_token") return StrategyKind::dist_token;
  if (s == "dchag") return StrategyKind::dchag;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

void StrategyConfig::validate(const ModelConfig& m) const {
  m.validate();
  const std::string where = std::string(to_string(kind)) + ": ";
  if (tp < 1) throw ConfigError(where + "tp_degree must be >= 1");
  if (kind == StrategyKind::serial && tp != 1) throw ConfigError(where + "serial requires tp_degree 1");
  if (m.heads % tp != 0)
    throw ConfigError(where + "heads (" + std::to_string(m.heads) + ") not divisible by tp_degree (" +
                      std::to_string(tp) + ")");
  if ((kind == StrategyKind::dist_token || kind == StrategyKind::dchag) && m.channels % tp != 0)
    throw ConfigError(where + "channels (" + std::to_string(m.channels) +
                      ") not divisible by tp_degree (" + std::to_string(tp) + ")");
  if (tree_max_group == 1) throw ConfigError(where + "tree max_group must be 0 or >= 2");
}

Architecture strategy_architecture(const ModelConfig& m, const StrategyConfig& s) {
  s.validate(m);
  if (s.kind != StrategyKind::dchag) return Architecture::flat(m);
  ModelConfig tree = m;
  tree.tree_max_group = s.tree_max_group;
  tree.agg_layer_kind = s.agg_layer_kind;
  return Architecture::hierarchical(tree, s.tp);
}

bool is_tp_split(const ParamInfo& info, const StrategyConfig& s) {
  if (s.kind == StrategyKind::serial || info.shard != ShardKind::tp_split) return false;
  return !info.final_layer || s.final_layer_tp_split;
}

namespace {

bool slabbed(const ParamInfo& info, const StrategyConfig& s) {
  return info.shard == ShardKind::channel_slab &&
         (s.kind == StrategyKind::dist_token || s.kind == StrategyKind::dchag);
}

// Row-major block copy of part `index` of `parts` along `axis`.
std::vector<double> take_part(std::span<const double> v, const Shape& shape, std::size_t axis,
                              std::size_t parts, std::size_t index) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t chunk = shape[axis] / parts * inner, row = shape[axis] * inner;
  std::vector<double> out;
  out.reserve(outer * chunk);
  for (std::size_t o = 0; o < outer; ++o)
    out.insert(out.end(), v.begin() + o * row + index * chunk, v.begin() + o * row + (index + 1) * chunk);
  return out;
}

void put_part(std::vector<double>& dst, std::span<const double> part, const Shape& shape,
              std::size_t axis, std::size_t parts, std::size_t index) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t chunk = shape[axis] / parts * inner, row = shape[axis] * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy(part.begin() + o * chunk, part.begin() + (o + 1) * chunk, dst.begin() + o * row + index * chunk);
}

}  // namespace

ParamStore shard_parameters(const ParamStore& master, const StrategyConfig& s, std::size_t t) {
  TagScope scope(tags::other);
  ParamStore local;
  for (std::size_t i = 0; i < master.size(); ++i) {
    ParamInfo info = master.infos()[i];
    const Tensor& full = master.tensors()[i];
    if (info.shard == ShardKind::slab_owned && s.kind == StrategyKind::dchag && info.owner != t) continue;
    std::vector<double> v;
    if (is_tp_split(info, s) || slabbed(info, s)) {
      const std::size_t axis = info.shard == ShardKind::channel_slab ? 0 : info.axis;
      if (info.shape[axis] % s.tp != 0)
        throw ConfigError("parameter " + info.name + " axis " + std::to_string(axis) + " of " +
                          shape_str(info.shape) + " not divisible by tp " + std::to_string(s.tp));
      v = take_part(full.data(), info.shape, axis, s.tp, t);
      info.shape[axis] /= s.tp;
    } else {
      v.assign(full.data().begin(), full.data().end());
    }
    Tensor leaf = Tensor::from_vector(info.shape, std::move(v), true);
    local.add(std::move(info), std::move(leaf));
  }
  return local;
}

GradMap unshard(const ParamStore& master, const StrategyConfig& s,
                const std::vector<const ParamStore*>& group, bool grads) {
  if (group.size() != s.tp) throw ConfigError("unshard: expected " + std::to_string(s.tp) + " stores");
  auto values = [&](const ParamStore& st, const std::string& name) {
    const Tensor& t = st.get(name);
    if (!grads) return std::vector<double>(t.data().begin(), t.data().end());
    if (!t.has_grad()) return std::vector<double>(t.numel(), 0.0);
    return std::vector<double>(t.grad().begin(), t.grad().end());
  };
  GradMap out;
  for (const auto& info : master.infos()) {
    if (info.shard == ShardKind::slab_owned && s.kind == StrategyKind::dchag) {
      out[info.name] = values(*group.at(info.owner), info.name);
    } else if (is_tp_split(info, s) || slabbed(info, s)) {
      const std::size_t axis = info.shard == ShardKind::channel_slab ? 0 : info.axis;
      std::vector<double> full(shape_numel(info.shape));
      for (std::size_t t = 0; t < s.tp; ++t)
        put_part(full, values(*group[t], info.name), info.shape, axis, s.tp, t);
      out[info.name] = std::move(full);
    } else {
      out[info.name] = values(*group[0], info.name);
    }
  }
  return out;
}

GradMap gradients(const ParamStore& params) {
  GradMap out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params.tensors()[i];
    out[params.infos()[i].name] =
        t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end()) : std::vector<double>(t.numel(), 0.0);
  }
  return out;
}

std::string param_group(std::string_view name) {
  if (name.starts_with("tok.")) return "tokenize";
  if (name.starts_with("agg.")) return "aggregate";
  if (name.starts_with("vit.block")) return std::string(name.substr(0, name.find('.', 4)));
  if (name.starts_with("dec.")) return "decoder";
  return "vit.embed";
}

}  // namespace chag
