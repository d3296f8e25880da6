#include "chag/model/config.hpp"

#include "chag/tensor/tensor.hpp"

namespace chag {

std::string_view to_string(AggVariant v) {
  return v == AggVariant::single_query ? "single_query" : "full_cross";
}

std::string_view to_string(AggLayerKind k) {
  return k == AggLayerKind::linear ? "linear" : "cross_attention";
}

AggVariant parse_agg_variant(std::string_view s) {
  if (s == "single_query") return AggVariant::single_query;
  if (s == "full_cross") return AggVariant::full_cross;
  throw ConfigError("unknown agg_variant '" + std::string(s) + "'");
}

AggLayerKind parse_agg_layer_kind(std::string_view s) {
  if (s == "linear") return AggLayerKind::linear;
  if (s == "cross_attention") return AggLayerKind::cross_attention;
  throw ConfigError("unknown agg_layer_kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(channels >= 1, "channels must be >= 1");
  require(patch >= 1, "patch must be >= 1");
  require(image_h >= patch && image_h % patch == 0,
          "image_h (" + std::to_string(image_h) + ") must be a multiple of patch (" +
              std::to_string(patch) + ")");
  require(image_w >= patch && image_w % patch == 0,
          "image_w (" + std::to_string(image_w) + ") must be a multiple of patch (" +
              std::to_string(patch) + ")");
  require(embed >= 1 && heads >= 1 && embed % heads == 0,
          "embed (" + std::to_string(embed) + ") must be divisible by heads (" +
              std::to_string(heads) + ")");
  require(mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask_ratio must be in [0, 1)");
  require(decoder_dim >= 1 && decoder_heads >= 1 && decoder_dim % decoder_heads == 0,
          "decoder_dim must be divisible by decoder_heads");
  require(tree_max_group == 0 || tree_max_group >= 2, "tree_max_group must be 0 or >= 2");
}

TreeSpec AggregationPlan::slab_tree(std::size_t channels) const {
  std::size_t local = slab_channels(channels);
  if (max_group == 0 || local <= max_group) return TreeSpec{{{local}}, local};
  return build_tree_spec(local, max_group);
}

Architecture Architecture::flat(const ModelConfig& m) {
  Architecture a;
  a.model = m;
  return a;
}

Architecture Architecture::hierarchical(const ModelConfig& m, std::size_t slabs) {
  Architecture a;
  a.model = m;
  a.agg.kind = AggregationPlan::Kind::hierarchical;
  a.agg.slabs = slabs;
  a.agg.max_group = m.tree_max_group;
  a.agg.layer_kind = m.agg_layer_kind;
  return a;
}

void Architecture::validate() const {
  model.validate();
  if (agg.kind == AggregationPlan::Kind::hierarchical) {
    if (agg.slabs == 0 || model.channels % agg.slabs != 0)
      throw ConfigError("channels (" + std::to_string(model.channels) +
                        ") must be divisible by the slab count (" + std::to_string(agg.slabs) +
                        ")");
    if (agg.max_group == 1) throw ConfigError("tree max_group must be 0 or >= 2");
  }
}

}  // namespace chag
