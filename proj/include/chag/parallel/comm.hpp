#pragma once

#include "chag/model/layers.hpp"
#include "chag/sim/runtime.hpp"

namespace chag {

/// TP hooks over a simulated rank's tensor-parallel group. The group-wide
/// sums are a ReduceScatter followed by an AllGather along the last axis.
class SimTpComm : public TpComm {
 public:
  explicit SimTpComm(RankContext& ctx) : ctx_(ctx) {}

  std::size_t size() const override { return ctx_.group_size(Axis::tp); }
  std::size_t index() const override { return ctx_.group_index(Axis::tp); }
  Tensor copy_in(const Tensor& x, const std::string& tag) override;
  Tensor reduce_out(const Tensor& x, const std::string& tag) override;
  Tensor gather(const Tensor& x, std::size_t axis, const std::string& tag) override;

 private:
  RankContext& ctx_;
};

}  // namespace chag
