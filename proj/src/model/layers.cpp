#include "chag/model/layers.hpp"

#include <cmath>

#include "chag/tensor/ops.hpp"

namespace chag {

TpComm& serial_comm() {
  static TpComm comm;
  return comm;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t heads) {
  if (q.dim() != 3 || k.dim() != 3 || v.dim() != 3)
    throw DimensionError("multihead_attention expects rank-3 q, k, v");
  const std::size_t n = q.size(0), lq = q.size(1), lk = k.size(1), w = q.size(2);
  if (k.shape() != v.shape() || k.size(0) != n || k.size(2) != w)
    throw DimensionError("multihead_attention: q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  if (heads == 0 || w % heads != 0)
    throw DimensionError("multihead_attention: width " + std::to_string(w) +
                         " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = w / heads;

  Tensor qs = scale(q, 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor qh = reshape(permute(reshape(qs, {n, lq, heads, dh}), {0, 2, 1, 3}), {n * heads, lq, dh});
  Tensor kt = reshape(permute(reshape(k, {n, lk, heads, dh}), {0, 2, 3, 1}), {n * heads, dh, lk});
  Tensor vh = reshape(permute(reshape(v, {n, lk, heads, dh}), {0, 2, 1, 3}), {n * heads, lk, dh});
  Tensor attn = softmax(bmm(qh, kt), 2);
  Tensor ctx = bmm(attn, vh);
  return reshape(permute(reshape(ctx, {n, heads, lq, dh}), {0, 2, 1, 3}), {n, lq, w});
}

namespace {

std::size_t local_heads(std::size_t heads, TpComm& comm) {
  if (heads % comm.size() != 0)
    throw ConfigError("heads (" + std::to_string(heads) + ") not divisible by tp degree (" +
                      std::to_string(comm.size()) + ")");
  return heads / comm.size();
}

}  // namespace

Tensor aggregation_layer(const Tensor& x, const ParamStore& p, const std::string& pre,
                         AggVariant variant, std::size_t heads, TpComm& comm,
                         const std::string& tag) {
  if (x.dim() != 3) throw DimensionError("aggregation_layer expects [N, G, D], got " + shape_str(x.shape()));
  const std::size_t n = x.size(0), d = x.size(2);
  const std::size_t h = local_heads(heads, comm);
  Tensor xin = comm.copy_in(x, tag);
  Tensor k = linear(xin, p.get(pre + "wk"), p.get(pre + "bk"));
  Tensor v = linear(xin, p.get(pre + "wv"), p.get(pre + "bv"));
  const std::size_t w = k.size(2);

  if (variant == AggVariant::single_query) {
    Tensor q = broadcast_to(reshape(p.get(pre + "query"), {1, 1, w}), {n, 1, w});
    Tensor ctx = multihead_attention(q, k, v, h);
    Tensor out = comm.reduce_out(linear(ctx, p.get(pre + "wo")), tag);
    return add(out, p.get(pre + "bo"));
  }

  Tensor q = linear(xin, p.get(pre + "wq"), p.get(pre + "bq"));
  Tensor ctx = multihead_attention(q, k, v, h);
  Tensor y = add(comm.reduce_out(linear(ctx, p.get(pre + "wo")), tag), p.get(pre + "bo"));
  // Attention pooling of the G outputs with a learned query.
  Tensor logits = scale(matmul(y, reshape(p.get(pre + "pool"), {d, 1})),
                        1.0 / std::sqrt(static_cast<double>(d)));
  Tensor weights = softmax(logits, 1);
  return bmm(transpose(weights, 1, 2), y);
}

Tensor linear_mix_node(const Tensor& x, const ParamStore& p, const std::string& pre) {
  return linear(channel_mix(x, p.get(pre + "mix")), p.get(pre + "w"), p.get(pre + "b"));
}

Tensor transformer_block(const Tensor& x, const ParamStore& p, const std::string& pre,
                         std::size_t heads, TpComm& comm, const std::string& tag) {
  const std::size_t h = local_heads(heads, comm);
  const std::string attn_tag = tag + ".attn", mlp_tag = tag + ".mlp";

  Tensor a = comm.copy_in(layernorm(x, p.get(pre + "ln1.gamma"), p.get(pre + "ln1.beta")), attn_tag);
  Tensor q = linear(a, p.get(pre + "attn.wq"), p.get(pre + "attn.bq"));
  Tensor k = linear(a, p.get(pre + "attn.wk"), p.get(pre + "attn.bk"));
  Tensor v = linear(a, p.get(pre + "attn.wv"), p.get(pre + "attn.bv"));
  Tensor ctx = multihead_attention(q, k, v, h);
  Tensor o = add(comm.reduce_out(linear(ctx, p.get(pre + "attn.wo")), attn_tag),
                 p.get(pre + "attn.bo"));
  Tensor x1 = add(x, o);

  Tensor m = comm.copy_in(layernorm(x1, p.get(pre + "ln2.gamma"), p.get(pre + "ln2.beta")), mlp_tag);
  Tensor hid = gelu(linear(m, p.get(pre + "mlp.w1"), p.get(pre + "mlp.b1")));
  Tensor o2 = add(comm.reduce_out(linear(hid, p.get(pre + "mlp.w2")), mlp_tag),
                  p.get(pre + "mlp.b2"));
  return add(x1, o2);
}

}  // namespace chag
