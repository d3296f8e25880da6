#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "chag/model/config.hpp"
#include "chag/model/params.hpp"

namespace chag {

enum class StrategyKind { serial, tp_only, dist_token, dchag };

std::string_view to_string(StrategyKind k);
StrategyKind parse_strategy_kind(std::string_view s);

struct StrategyConfig {
  StrategyKind kind = StrategyKind::serial;
  std::size_t tp = 1;
  // D-CHAG partial-aggregation tree: largest group per node (0 = one node per
  // rank) and node type.
  std::size_t tree_max_group = 0;
  AggLayerKind agg_layer_kind = AggLayerKind::linear;
  bool final_layer_tp_split = false;

  /// Throws ConfigError for combinations the strategy cannot run.
  void validate(const ModelConfig& m) const;
};

/// The architecture a strategy instantiates: flat aggregation for serial,
/// tp_only and dist_token; one tree per rank plus a final layer for dchag.
Architecture strategy_architecture(const ModelConfig& m, const StrategyConfig& s);

/// Whether parameter `info` is split over the TP group under `s`.
bool is_tp_split(const ParamInfo& info, const StrategyConfig& s);

/// Local parameters of TP rank `tp_index`: exact slices/copies of `master`.
ParamStore shard_parameters(const ParamStore& master, const StrategyConfig& s,
                            std::size_t tp_index);

using GradMap = std::map<std::string, std::vector<double>>;

/// Reassembles master-layout tensors from the TP group's local stores.
/// `grads` selects gradients instead of values; missing gradients count as zero.
GradMap unshard(const ParamStore& master, const StrategyConfig& s,
                const std::vector<const ParamStore*>& tp_group, bool grads);

/// Gradients of a single store by name.
GradMap gradients(const ParamStore& params);

/// FSDP / DP synchronisation unit a parameter belongs to.
std::string param_group(std::string_view name);

}  // namespace chag
