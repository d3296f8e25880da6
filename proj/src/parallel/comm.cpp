#include "chag/parallel/comm.hpp"

#include "chag/tensor/ops.hpp"

namespace chag {

namespace {

Tensor group_sum(RankContext& ctx, const Tensor& t, const std::string& tag) {
  const std::size_t last = t.dim() - 1;
  return ctx.all_gather(Axis::tp, ctx.reduce_scatter(Axis::tp, t, last, tag), last, tag);
}

}  // namespace

Tensor SimTpComm::copy_in(const Tensor& x, const std::string& tag) {
  RankContext& ctx = ctx_;
  const Shape shape = x.shape();
  return record_view("tp_copy_in", x, shape, [&ctx, shape, tag](std::span<const double> g, const BackwardContext& b) {
    Tensor grad = Tensor::from_vector(shape, std::vector<double>(g.begin(), g.end()));
    b.add_grad(0, group_sum(ctx, grad, tag).data());
  });
}

Tensor SimTpComm::reduce_out(const Tensor& x, const std::string& tag) {
  Tensor summed = group_sum(ctx_, x, tag);
  return record_adopt("tp_reduce_out", summed, {x},
                      [](std::span<const double> g, const BackwardContext& b) { b.add_grad(0, g); });
}

Tensor SimTpComm::gather(const Tensor& x, std::size_t axis, const std::string& tag) {
  Tensor full = ctx_.all_gather(Axis::tp, x, axis, tag);
  const Shape in = x.shape();
  const std::size_t index = this->index();
  return record_adopt("tp_gather", full, {x}, [in, axis, index](std::span<const double> g, const BackwardContext& b) {
    // Every rank holds the full incoming gradient; keep this rank's slice.
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= in[i];
    for (std::size_t i = axis; i < in.size(); ++i) inner *= in[i];
    const std::size_t row = g.size() / outer;
    std::vector<double> mine;
    mine.reserve(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
      mine.insert(mine.end(), g.begin() + o * row + index * inner, g.begin() + o * row + (index + 1) * inner);
    b.add_grad(0, mine);
  });
}

}  // namespace chag
