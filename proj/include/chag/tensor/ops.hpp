#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chag/tensor/tensor.hpp"

namespace chag {

// Linear algebra. FLOPs (2mkn) are charged to the current tag.
Tensor matmul(const Tensor& a, const Tensor& b);           // [..., m, k] x [k, n]
Tensor bmm(const Tensor& a, const Tensor& b);              // [g, m, k] x [g, k, n]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Elementwise. `add` broadcasts b into a's shape (numpy rules, right-aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor gelu(const Tensor& x);

// Reductions.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 double eps = 1e-5);

// Layout.
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& x, std::size_t a0, std::size_t a1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor broadcast_to(const Tensor& x, Shape shape);

/// [..., H, W] -> [..., (H/P)*(W/P), P*P]; patch s = row-major over the
/// patch grid, element k = row-major inside the patch.
Tensor unfold_patches(const Tensor& x, std::size_t patch);
/// Inverse of unfold_patches.
Tensor fold_patches(const Tensor& x, std::size_t patch, std::size_t height,
                    std::size_t width);

/// out[n, 0, d] = sum_g w[g] * x[n, g, d]
Tensor channel_mix(const Tensor& x, const Tensor& weights);

/// x: [B, S, D]; positions where mask[b*S+s] != 0 take `token` ([D]).
Tensor mask_replace(const Tensor& x, const Tensor& token,
                    std::span<const std::uint8_t> mask);

/// Mean squared error over the masked rows of [B, S, F]; `target` is treated
/// as a constant.
Tensor masked_mse(const Tensor& pred, const Tensor& target,
                  std::span<const std::uint8_t> mask);

}  // namespace chag
