#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "chag/model/tree_spec.hpp"

namespace chag {

/// How one aggregation layer reduces G channel tokens at each position.
enum class AggVariant {
  single_query,  // one learned query over G keys: 1 x G logits per head
  full_cross,    // G queries over G keys (G x G logits), then attention pooling
};

/// Node type inside a hierarchical aggregation tree.
enum class AggLayerKind { cross_attention, linear };

std::string_view to_string(AggVariant v);
std::string_view to_string(AggLayerKind k);
AggVariant parse_agg_variant(std::string_view s);
AggLayerKind parse_agg_layer_kind(std::string_view s);

inline constexpr std::size_t kMetadataDim = 4;

struct ModelConfig {
  std::size_t channels = 4;
  std::size_t image_h = 8;
  std::size_t image_w = 8;
  std::size_t patch = 4;
  std::size_t embed = 8;
  std::size_t depth = 1;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  AggVariant agg_variant = AggVariant::single_query;
  AggLayerKind agg_layer_kind = AggLayerKind::linear;
  // Largest group a tree node may aggregate; 0 means one node per slab.
  std::size_t tree_max_group = 0;
  double mask_ratio = 0.5;
  std::size_t decoder_depth = 1;
  std::size_t decoder_dim = 8;
  std::size_t decoder_heads = 1;

  std::size_t spatial_tokens() const { return (image_h / patch) * (image_w / patch); }
  std::size_t patch_area() const { return patch * patch; }
  std::size_t mlp_hidden() const { return mlp_ratio * embed; }

  /// Throws ConfigError naming the violated constraint.
  void validate() const;
};

/// The aggregation topology actually instantiated as parameters.
struct AggregationPlan {
  enum class Kind { flat, hierarchical };
  Kind kind = Kind::flat;
  // Hierarchical: channels are split into `slabs` equal contiguous slabs, each
  // reduced by its own tree, then a shared final layer reduces the slabs.
  std::size_t slabs = 1;
  std::size_t max_group = 0;
  AggLayerKind layer_kind = AggLayerKind::linear;

  std::size_t slab_channels(std::size_t channels) const { return channels / slabs; }
  TreeSpec slab_tree(std::size_t channels) const;
};

struct Architecture {
  ModelConfig model;
  AggregationPlan agg;

  static Architecture flat(const ModelConfig& m);
  /// Per-slab trees (from the model's tree settings) plus a final layer.
  static Architecture hierarchical(const ModelConfig& m, std::size_t slabs);

  void validate() const;
};

}  // namespace chag
