#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "chag/model/config.hpp"
#include "chag/tensor/tensor.hpp"

namespace chag {

/// How a parameter is laid out across tensor-parallel ranks.
enum class ShardKind {
  replicated,
  tp_split,      // contiguous split along `axis` (heads or MLP hidden units)
  channel_slab,  // contiguous split of the channel axis (axis 0)
  slab_owned,    // lives only on the rank owning slab `owner`
};

enum class ParamInit { trunc_normal, zeros, ones, constant };

struct ParamInfo {
  std::string name;
  Shape shape;
  std::string component;  // one of the resource tags
  ShardKind shard = ShardKind::replicated;
  std::size_t axis = 0;
  std::size_t owner = 0;
  // Belongs to the shared final aggregation layer; split only when requested.
  bool final_layer = false;
  ParamInit init = ParamInit::trunc_normal;
  double init_value = 0.0;
};

/// Ordered set of named leaf tensors.
class ParamStore {
 public:
  void add(ParamInfo info, Tensor value);

  bool contains(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  const ParamInfo& info(std::string_view name) const;

  std::size_t size() const { return tensors_.size(); }
  const std::vector<ParamInfo>& infos() const { return infos_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t numel() const;
  void zero_grad();

 private:
  std::vector<ParamInfo> infos_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Every parameter of `arch` in creation order.
std::vector<ParamInfo> parameter_layout(const Architecture& arch);

/// Values depend only on (seed, name, shape), so shared parameters agree
/// across architectures built from the same seed.
Tensor init_parameter(const ParamInfo& info, std::uint64_t seed);
ParamStore init_parameters(const Architecture& arch, std::uint64_t seed);

std::uint64_t name_key(std::string_view name);

// Parameter name prefixes.
std::string slab_node_prefix(std::size_t slab, std::size_t level, std::size_t node);
inline constexpr std::string_view kFlatAggPrefix = "agg.flat.";
inline constexpr std::string_view kFinalAggPrefix = "agg.final.";
std::string vit_block_prefix(std::size_t i);
std::string dec_block_prefix(std::size_t i);

}  // namespace chag
