#pragma once

#include <cstddef>
#include <string>

#include "chag/model/config.hpp"
#include "chag/model/params.hpp"
#include "chag/tensor/tensor.hpp"

namespace chag {

/// Tensor-parallel hooks used by split layers. The default implementation is
/// the single-rank case: every hook is the identity.
class TpComm {
 public:
  virtual ~TpComm() = default;
  virtual std::size_t size() const { return 1; }
  virtual std::size_t index() const { return 0; }
  /// Forward identity; backward sums the input gradient over the group.
  virtual Tensor copy_in(const Tensor& x, const std::string& tag) {
    (void)tag;
    return x;
  }
  /// Forward sums partial outputs over the group; backward identity.
  virtual Tensor reduce_out(const Tensor& x, const std::string& tag) {
    (void)tag;
    return x;
  }
  /// Concatenates per-rank tensors along `axis` by group index; backward keeps
  /// this rank's slice of the incoming gradient without communicating.
  virtual Tensor gather(const Tensor& x, std::size_t axis, const std::string& tag) {
    (void)axis;
    (void)tag;
    return x;
  }
};

TpComm& serial_comm();

/// Scaled dot-product attention over `heads` heads. q: [N, Lq, W],
/// k, v: [N, Lk, W] with W divisible by heads. Returns [N, Lq, W].
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

/// One cross-attention aggregation layer reducing [N, G, D] to [N, 1, D].
/// `heads` counts heads across the whole TP group.
Tensor aggregation_layer(const Tensor& x, const ParamStore& params, const std::string& prefix,
                         AggVariant variant, std::size_t heads, TpComm& comm,
                         const std::string& tag);

/// Affine channel mix: sum_g mix[g] * x[:, g, :] then W, b. [N, G, D] -> [N, 1, D].
Tensor linear_mix_node(const Tensor& x, const ParamStore& params, const std::string& prefix);

/// Pre-norm transformer block on [B, L, D].
Tensor transformer_block(const Tensor& x, const ParamStore& params, const std::string& prefix,
                         std::size_t heads, TpComm& comm, const std::string& tag);

}  // namespace chag
