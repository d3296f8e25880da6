#include "chag/tensor/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "chag/tensor/resources.hpp"

namespace chag {

namespace {

std::vector<double> copy_of(std::span<const double> s) {
  return std::vector<double>(s.begin(), s.end());
}

void charge_flops(std::uint64_t n) { current_tracker()->add_flops(current_tag(), n); }

void require(bool cond, const std::string& message) {
  if (!cond) throw DimensionError(message);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> st(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
  return st;
}

// Splits a shape around `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// C += A * B on raw row-major buffers; A [m,k], B [k,n].
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T; A [m,n], B [k,n] -> C [m,k].
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += a[i * n + j] * b[p * n + j];
      c[i * k + p] += s;
    }
  }
}

// C += A^T * B; A [m,k], B [m,n] -> C [k,n].
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      double* crow = c + p * n;
      const double* brow = b + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Maps each flat index of `out` to the flat index of a right-aligned
// broadcast operand of shape `small`.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& small) {
  require(small.size() <= out.size(),
          "cannot broadcast " + shape_str(small) + " to " + shape_str(out));
  const std::size_t offset = out.size() - small.size();
  for (std::size_t i = 0; i < small.size(); ++i) {
    require(small[i] == 1 || small[i] == out[offset + i],
            "cannot broadcast " + shape_str(small) + " to " + shape_str(out));
  }
  const auto small_strides = strides_of(small);
  std::vector<std::size_t> map(shape_numel(out));
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < map.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < small.size(); ++i) {
      if (small[i] != 1) s += idx[offset + i] * small_strides[i];
    }
    map[flat] = s;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  require(as.size() >= 2 && bs.size() == 2 && as.back() == bs[0],
          "matmul: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  const std::size_t k = as.back();
  const std::size_t n = bs[1];
  const std::size_t m = a.numel() / k;
  Shape out_shape(as.begin(), as.end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  charge_flops(2ULL * m * k * n);
  return record_op("matmul", std::move(out_shape), std::move(out), {a, b},
                   [m, k, n](std::span<const double> g, const BackwardContext& ctx) {
                     if (ctx.needs_grad(0)) {
                       std::vector<double> ga(m * k, 0.0);
                       gemm_nt_acc(g.data(), ctx.input_data(1).data(), ga.data(), m, n, k);
                       ctx.add_grad(0, ga);
                     }
                     if (ctx.needs_grad(1)) {
                       std::vector<double> gb(k * n, 0.0);
                       gemm_tn_acc(ctx.input_data(0).data(), g.data(), gb.data(), m, k, n);
                       ctx.add_grad(1, gb);
                     }
                   });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0] && as[2] == bs[1],
          "bmm: incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  const std::size_t batch = as[0], m = as[1], k = as[2], n = bs[2];
  std::vector<double> out(batch * m * n, 0.0);
  for (std::size_t g = 0; g < batch; ++g) {
    gemm_acc(a.data().data() + g * m * k, b.data().data() + g * k * n,
             out.data() + g * m * n, m, k, n);
  }
  charge_flops(2ULL * batch * m * k * n);
  return record_op(
      "bmm", {batch, m, n}, std::move(out), {a, b},
      [batch, m, k, n](std::span<const double> g, const BackwardContext& ctx) {
        if (ctx.needs_grad(0)) {
          std::vector<double> ga(batch * m * k, 0.0);
          for (std::size_t i = 0; i < batch; ++i) {
            gemm_nt_acc(g.data() + i * m * n, ctx.input_data(1).data() + i * k * n,
                        ga.data() + i * m * k, m, n, k);
          }
          ctx.add_grad(0, ga);
        }
        if (ctx.needs_grad(1)) {
          std::vector<double> gb(batch * k * n, 0.0);
          for (std::size_t i = 0; i < batch; ++i) {
            gemm_tn_acc(ctx.input_data(0).data() + i * m * k, g.data() + i * m * n,
                        gb.data() + i * k * n, m, k, n);
          }
          ctx.add_grad(1, gb);
        }
      });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  require(!xs.empty() && ws.size() == 2 && xs.back() == ws[0],
          "linear: incompatible shapes " + shape_str(xs) + " and " + shape_str(ws));
  const std::size_t k = ws[0], n = ws[1];
  const std::size_t m = x.numel() / k;
  const bool has_bias = bias.defined();
  if (has_bias) {
    require(bias.shape() == Shape{n},
            "linear: bias " + shape_str(bias.shape()) + " for output width " +
                std::to_string(n));
  }
  std::vector<double> out(m * n, 0.0);
  if (has_bias) {
    for (std::size_t i = 0; i < m; ++i) {
      std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
    }
  }
  gemm_acc(x.data().data(), w.data().data(), out.data(), m, k, n);
  charge_flops(2ULL * m * k * n);
  Shape out_shape(xs.begin(), xs.end() - 1);
  out_shape.push_back(n);
  std::vector<Tensor> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return record_op(
      "linear", std::move(out_shape), std::move(out), inputs,
      [m, k, n, has_bias](std::span<const double> g, const BackwardContext& ctx) {
        if (ctx.needs_grad(0)) {
          std::vector<double> gx(m * k, 0.0);
          gemm_nt_acc(g.data(), ctx.input_data(1).data(), gx.data(), m, n, k);
          ctx.add_grad(0, gx);
        }
        if (ctx.needs_grad(1)) {
          std::vector<double> gw(k * n, 0.0);
          gemm_tn_acc(ctx.input_data(0).data(), g.data(), gw.data(), m, k, n);
          ctx.add_grad(1, gw);
        }
        if (has_bias && ctx.needs_grad(2)) {
          std::vector<double> gb(n, 0.0);
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
          }
          ctx.add_grad(2, gb);
        }
      });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    std::vector<double> out = copy_of(a.data());
    auto bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
    return record_op("add", a.shape(), std::move(out), {a, b},
                     [](std::span<const double> g, const BackwardContext& ctx) {
                       ctx.add_grad(0, g);
                       ctx.add_grad(1, g);
                     });
  }
  auto map = broadcast_index(a.shape(), b.shape());
  std::vector<double> out = copy_of(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bd[map[i]];
  const std::size_t bn = b.numel();
  return record_op("add_broadcast", a.shape(), std::move(out), {a, b},
                   [map = std::move(map), bn](std::span<const double> g,
                                              const BackwardContext& ctx) {
                     ctx.add_grad(0, g);
                     if (ctx.needs_grad(1)) {
                       std::vector<double> gb(bn, 0.0);
                       for (std::size_t i = 0; i < g.size(); ++i) gb[map[i]] += g[i];
                       ctx.add_grad(1, gb);
                     }
                   });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out = copy_of(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return record_op("sub", a.shape(), std::move(out), {a, b},
                   [](std::span<const double> g, const BackwardContext& ctx) {
                     ctx.add_grad(0, g);
                     if (ctx.needs_grad(1)) {
                       std::vector<double> neg(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
                       ctx.add_grad(1, neg);
                     }
                   });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(),
          "mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  std::vector<double> out = copy_of(a.data());
  auto bd = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  return record_op("mul", a.shape(), std::move(out), {a, b},
                   [](std::span<const double> g, const BackwardContext& ctx) {
                     for (std::size_t which = 0; which < 2; ++which) {
                       if (!ctx.needs_grad(which)) continue;
                       auto other = ctx.input_data(1 - which);
                       std::vector<double> gi(g.size());
                       for (std::size_t i = 0; i < g.size(); ++i) gi[i] = g[i] * other[i];
                       ctx.add_grad(which, gi);
                     }
                   });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out = copy_of(x.data());
  for (double& v : out) v *= factor;
  return record_op("scale", x.shape(), std::move(out), {x},
                   [factor](std::span<const double> g, const BackwardContext& ctx) {
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * factor;
                     ctx.add_grad(0, gx);
                   });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  std::vector<double> out = copy_of(x.data());
  for (double& v : out) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return record_op("gelu", x.shape(), std::move(out), {x},
                   [](std::span<const double> g, const BackwardContext& ctx) {
                     const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
                     auto xd = ctx.input_data(0);
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       const double v = xd[i];
                       const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                       const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
                       gx[i] = g[i] * (cdf + v * pdf);
                     }
                     ctx.add_grad(0, gx);
                   });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t n = x.numel();
  return record_op("sum", {}, {s}, {x},
                   [n](std::span<const double> g, const BackwardContext& ctx) {
                     ctx.add_grad(0, std::vector<double>(n, g[0]));
                   });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.numel();
  require(n > 0, "mean of an empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  return record_op("mean", {}, {s / static_cast<double>(n)}, {x},
                   [n](std::span<const double> g, const BackwardContext& ctx) {
                     ctx.add_grad(0, std::vector<double>(n, g[0] / static_cast<double>(n)));
                   });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.dim(), "softmax: axis " + std::to_string(axis) +
                              " out of range for " + shape_str(x.shape()));
  const auto sp = split_axis(x.shape(), axis);
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.extent * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < sp.extent; ++e) mx = std::max(mx, xd[base + e * sp.inner]);
      double z = 0.0;
      for (std::size_t e = 0; e < sp.extent; ++e) {
        const double v = std::exp(xd[base + e * sp.inner] - mx);
        out[base + e * sp.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < sp.extent; ++e) out[base + e * sp.inner] /= z;
    }
  }
  return record_op("softmax", x.shape(), std::move(out), {x},
                   [sp](std::span<const double> g, const BackwardContext& ctx) {
                     auto y = ctx.output_data();
                     std::vector<double> gx(g.size());
                     for (std::size_t o = 0; o < sp.outer; ++o) {
                       for (std::size_t in = 0; in < sp.inner; ++in) {
                         const std::size_t base = o * sp.extent * sp.inner + in;
                         double dot = 0.0;
                         for (std::size_t e = 0; e < sp.extent; ++e) {
                           dot += g[base + e * sp.inner] * y[base + e * sp.inner];
                         }
                         for (std::size_t e = 0; e < sp.extent; ++e) {
                           const std::size_t i = base + e * sp.inner;
                           gx[i] = y[i] * (g[i] - dot);
                         }
                       }
                     }
                     ctx.add_grad(0, gx);
                   });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.dim() >= 1, "layernorm on a scalar");
  const std::size_t n = x.shape().back();
  require(gamma.shape() == Shape{n} && beta.shape() == Shape{n},
          "layernorm: gamma/beta " + shape_str(gamma.shape()) + " for width " +
              std::to_string(n));
  const std::size_t rows = x.numel() / n;
  auto xd = x.data();
  auto gd = gamma.data();
  auto bd = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      out[r * n + j] = (row[j] - mu) * rstd[r] * gd[j] + bd[j];
    }
  }
  return record_op(
      "layernorm", x.shape(), std::move(out), {x, gamma, beta},
      [rows, n, rstd = std::move(rstd)](std::span<const double> g,
                                        const BackwardContext& ctx) {
        auto xd = ctx.input_data(0);
        auto gd = ctx.input_data(1);
        std::vector<double> gx(rows * n), ggamma(n, 0.0), gbeta(n, 0.0);
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* row = xd.data() + r * n;
          double mu = 0.0;
          for (std::size_t j = 0; j < n; ++j) mu += row[j];
          mu /= static_cast<double>(n);
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (row[j] - mu) * rstd[r];
            const double gj = g[r * n + j];
            ggamma[j] += gj * xhat[j];
            gbeta[j] += gj;
            dxhat[j] = gj * gd[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xhat[j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          for (std::size_t j = 0; j < n; ++j) {
            gx[r * n + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
          }
        }
        ctx.add_grad(0, gx);
        ctx.add_grad(1, ggamma);
        ctx.add_grad(2, gbeta);
      });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  return record_view("reshape", x, std::move(shape),
                     [](std::span<const double> g, const BackwardContext& ctx) {
                       ctx.add_grad(0, g);
                     });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& order) {
  const auto& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  require(order.size() == rank, "permute: order rank mismatch for " + shape_str(in_shape));
  std::vector<bool> seen(rank, false);
  for (std::size_t o : order) {
    require(o < rank && !seen[o], "permute: invalid axis order");
    seen[o] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[order[i]];
  const auto in_strides = strides_of(in_shape);
  // Flat input index for every flat output index.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t flat = 0; flat < src.size(); ++flat) {
    std::size_t s = 0;
    for (std::size_t i = 0; i < rank; ++i) s += idx[i] * in_strides[order[i]];
    src[flat] = s;
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  auto xd = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = xd[src[i]];
  return record_op("permute", std::move(out_shape), std::move(out), {x},
                   [src = std::move(src)](std::span<const double> g,
                                          const BackwardContext& ctx) {
                     std::vector<double> gx(g.size());
                     for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] = g[i];
                     ctx.add_grad(0, gx);
                   });
}

Tensor transpose(const Tensor& x, std::size_t a0, std::size_t a1) {
  std::vector<std::size_t> order(x.dim());
  std::iota(order.begin(), order.end(), 0);
  require(a0 < order.size() && a1 < order.size(), "transpose: axis out of range");
  std::swap(order[a0], order[a1]);
  return permute(x, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat of zero tensors");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis out of range for " + shape_str(first));
  std::vector<std::size_t> extents;
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      require(i == axis || s[i] == first[i],
              "concat: shapes " + shape_str(first) + " and " + shape_str(s));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const auto sp = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].data();
    const std::size_t chunk = extents[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(pd.begin() + o * chunk, chunk,
                  out.begin() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += extents[p];
  }
  return record_op("concat", std::move(out_shape), std::move(out), parts,
                   [sp, extents](std::span<const double> g, const BackwardContext& ctx) {
                     std::size_t offset = 0;
                     for (std::size_t p = 0; p < extents.size(); ++p) {
                       const std::size_t chunk = extents[p] * sp.inner;
                       if (ctx.needs_grad(p)) {
                         std::vector<double> gp(sp.outer * chunk);
                         for (std::size_t o = 0; o < sp.outer; ++o) {
                           std::copy_n(g.begin() + o * sp.extent * sp.inner + offset * sp.inner,
                                       chunk, gp.begin() + o * chunk);
                         }
                         ctx.add_grad(p, gp);
                       }
                       offset += extents[p];
                     }
                   });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto& s = x.shape();
  require(axis < s.size() && begin <= end && end <= s[axis],
          "slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
              std::to_string(axis) + " of " + shape_str(s));
  const auto sp = split_axis(s, axis);
  Shape out_shape = s;
  out_shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * sp.inner;
  auto xd = x.data();
  std::vector<double> out(sp.outer * chunk);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::copy_n(xd.begin() + o * sp.extent * sp.inner + begin * sp.inner, chunk,
                out.begin() + o * chunk);
  }
  const std::size_t total = x.numel();
  return record_op("slice", std::move(out_shape), std::move(out), {x},
                   [sp, begin, chunk, total](std::span<const double> g,
                                             const BackwardContext& ctx) {
                     std::vector<double> gx(total, 0.0);
                     for (std::size_t o = 0; o < sp.outer; ++o) {
                       std::copy_n(g.begin() + o * chunk, chunk,
                                   gx.begin() + o * sp.extent * sp.inner + begin * sp.inner);
                     }
                     ctx.add_grad(0, gx);
                   });
}

Tensor broadcast_to(const Tensor& x, Shape shape) {
  auto map = broadcast_index(shape, x.shape());
  auto xd = x.data();
  std::vector<double> out(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xd[map[i]];
  const std::size_t n = x.numel();
  return record_op("broadcast_to", std::move(shape), std::move(out), {x},
                   [map = std::move(map), n](std::span<const double> g,
                                             const BackwardContext& ctx) {
                     std::vector<double> gx(n, 0.0);
                     for (std::size_t i = 0; i < g.size(); ++i) gx[map[i]] += g[i];
                     ctx.add_grad(0, gx);
                   });
}

namespace {

// Flat source index (within one [H, W] plane) for every (s, k) of a patch grid.
std::vector<std::size_t> patch_map(std::size_t height, std::size_t width,
                                   std::size_t patch) {
  const std::size_t gw = width / patch;
  const std::size_t gh = height / patch;
  std::vector<std::size_t> map;
  map.reserve(height * width);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t iy = 0; iy < patch; ++iy) {
        for (std::size_t ix = 0; ix < patch; ++ix) {
          map.push_back((py * patch + iy) * width + px * patch + ix);
        }
      }
    }
  }
  return map;
}

void check_patch_grid(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw ConfigError("image " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible into " + std::to_string(patch) + "x" +
                      std::to_string(patch) + " patches");
  }
}

}  // namespace

Tensor unfold_patches(const Tensor& x, std::size_t patch) {
  const auto& s = x.shape();
  require(s.size() >= 2, "unfold_patches needs [..., H, W], got " + shape_str(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  check_patch_grid(h, w, patch);
  const auto map = patch_map(h, w, patch);
  const std::size_t plane = h * w;
  const std::size_t planes = x.numel() / plane;
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.push_back((h / patch) * (w / patch));
  out_shape.push_back(patch * patch);
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] = xd[p * plane + map[i]];
  }
  return record_op("unfold_patches", std::move(out_shape), std::move(out), {x},
                   [map, plane, planes](std::span<const double> g,
                                        const BackwardContext& ctx) {
                     std::vector<double> gx(g.size());
                     for (std::size_t p = 0; p < planes; ++p) {
                       for (std::size_t i = 0; i < plane; ++i) {
                         gx[p * plane + map[i]] = g[p * plane + i];
                       }
                     }
                     ctx.add_grad(0, gx);
                   });
}

Tensor fold_patches(const Tensor& x, std::size_t patch, std::size_t height,
                    std::size_t width) {
  const auto& s = x.shape();
  check_patch_grid(height, width, patch);
  require(s.size() >= 2 && s[s.size() - 2] == (height / patch) * (width / patch) &&
              s.back() == patch * patch,
          "fold_patches: " + shape_str(s) + " is not a patch grid of " +
              std::to_string(height) + "x" + std::to_string(width));
  const auto map = patch_map(height, width, patch);
  const std::size_t plane = height * width;
  const std::size_t planes = x.numel() / plane;
  Shape out_shape(s.begin(), s.end() - 2);
  out_shape.push_back(height);
  out_shape.push_back(width);
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + map[i]] = xd[p * plane + i];
  }
  return record_op("fold_patches", std::move(out_shape), std::move(out), {x},
                   [map, plane, planes](std::span<const double> g,
                                        const BackwardContext& ctx) {
                     std::vector<double> gx(g.size());
                     for (std::size_t p = 0; p < planes; ++p) {
                       for (std::size_t i = 0; i < plane; ++i) {
                         gx[p * plane + i] = g[p * plane + map[i]];
                       }
                     }
                     ctx.add_grad(0, gx);
                   });
}

Tensor channel_mix(const Tensor& x, const Tensor& weights) {
  const auto& s = x.shape();
  require(s.size() == 3 && weights.shape() == Shape{s[1]},
          "channel_mix: input " + shape_str(s) + " with weights " +
              shape_str(weights.shape()));
  const std::size_t n = s[0], groups = s[1], d = s[2];
  auto xd = x.data();
  auto wd = weights.data();
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double w = wd[g];
      const double* row = xd.data() + (i * groups + g) * d;
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] += w * row[j];
    }
  }
  charge_flops(2ULL * n * groups * d);
  return record_op("channel_mix", {n, 1, d}, std::move(out), {x, weights},
                   [n, groups, d](std::span<const double> g, const BackwardContext& ctx) {
                     auto xd = ctx.input_data(0);
                     auto wd = ctx.input_data(1);
                     if (ctx.needs_grad(0)) {
                       std::vector<double> gx(n * groups * d);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t c = 0; c < groups; ++c) {
                           for (std::size_t j = 0; j < d; ++j) {
                             gx[(i * groups + c) * d + j] = wd[c] * g[i * d + j];
                           }
                         }
                       }
                       ctx.add_grad(0, gx);
                     }
                     if (ctx.needs_grad(1)) {
                       std::vector<double> gw(groups, 0.0);
                       for (std::size_t i = 0; i < n; ++i) {
                         for (std::size_t c = 0; c < groups; ++c) {
                           const double* row = xd.data() + (i * groups + c) * d;
                           for (std::size_t j = 0; j < d; ++j) gw[c] += row[j] * g[i * d + j];
                         }
                       }
                       ctx.add_grad(1, gw);
                     }
                   });
}

Tensor mask_replace(const Tensor& x, const Tensor& token,
                    std::span<const std::uint8_t> mask) {
  const auto& s = x.shape();
  require(s.size() == 3 && token.shape() == Shape{s[2]} && mask.size() == s[0] * s[1],
          "mask_replace: input " + shape_str(s) + ", token " +
              shape_str(token.shape()) + ", mask of " + std::to_string(mask.size()));
  const std::size_t rows = s[0] * s[1], d = s[2];
  std::vector<double> out = copy_of(x.data());
  auto td = token.data();
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (m[r]) std::copy(td.begin(), td.end(), out.begin() + r * d);
  }
  return record_op("mask_replace", s, std::move(out), {x, token},
                   [rows, d, m = std::move(m)](std::span<const double> g,
                                               const BackwardContext& ctx) {
                     std::vector<double> gx(g.begin(), g.end());
                     std::vector<double> gt(d, 0.0);
                     for (std::size_t r = 0; r < rows; ++r) {
                       if (!m[r]) continue;
                       for (std::size_t j = 0; j < d; ++j) {
                         gt[j] += gx[r * d + j];
                         gx[r * d + j] = 0.0;
                       }
                     }
                     ctx.add_grad(0, gx);
                     ctx.add_grad(1, gt);
                   });
}

Tensor masked_mse(const Tensor& pred, const Tensor& target,
                  std::span<const std::uint8_t> mask) {
  const auto& s = pred.shape();
  require(s.size() == 3 && target.shape() == s && mask.size() == s[0] * s[1],
          "masked_mse: prediction " + shape_str(s) + ", target " +
              shape_str(target.shape()) + ", mask of " + std::to_string(mask.size()));
  const std::size_t rows = s[0] * s[1], f = s[2];
  std::size_t masked = 0;
  for (auto v : mask) masked += v ? 1 : 0;
  require(masked > 0, "masked_mse: mask selects no positions");
  const double denom = static_cast<double>(masked * f);
  auto pd = pred.data();
  auto td = target.data();
  std::vector<double> diff(rows * f, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    for (std::size_t j = 0; j < f; ++j) {
      const double e = pd[r * f + j] - td[r * f + j];
      diff[r * f + j] = e;
      total += e * e;
    }
  }
  // The residual is saved for backward, so it is accounted like an activation.
  auto saved = std::make_shared<detail::Storage>(std::move(diff), current_tag());
  return record_op("masked_mse", {}, {total / denom}, {pred},
                   [saved = std::move(saved), denom](std::span<const double> g,
                                                     const BackwardContext& ctx) {
                     const auto& diff = saved->values;
                     std::vector<double> gp(diff.size());
                     const double k = 2.0 * g[0] / denom;
                     for (std::size_t i = 0; i < diff.size(); ++i) gp[i] = k * diff[i];
                     ctx.add_grad(0, gp);
                   });
}

}  // namespace chag
