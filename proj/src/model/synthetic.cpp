#include "chag/model/synthetic.hpp"

#include <cmath>
#include <numbers>

namespace chag {

namespace {
constexpr std::uint64_t kSampleStream = 0x5a4d'504c'4500'0001ULL;
}

SyntheticDataset::SyntheticDataset(const ModelConfig& cfg, std::uint64_t seed, std::size_t rank)
    : cfg_(cfg), seed_(seed), rank_(rank) {
  cfg_.validate();
  const std::size_t C = cfg.channels, H = cfg.image_h, W = cfg.image_w;
  RngState rng = RngState(seed).fork(0);
  loadings_.resize((rank + 1) * C);
  modes_.resize((rank + 1) * H * W);
  for (std::size_t k = 0; k <= rank; ++k) {
    for (std::size_t c = 0; c < C; ++c) loadings_[k * C + c] = rng.normal();
    double fy = 1.0 + static_cast<double>(rng.below(2));
    double fx = 1.0 + static_cast<double>(rng.below(2));
    double phase = 2.0 * std::numbers::pi * rng.uniform();
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        modes_[k * H * W + y * W + x] =
            std::sin(2.0 * std::numbers::pi *
                         (fy * static_cast<double>(y) / static_cast<double>(H) +
                          fx * static_cast<double>(x) / static_cast<double>(W)) +
                     phase);
  }
}

Batch SyntheticDataset::batch(std::size_t first, std::size_t count) const {
  const std::size_t C = cfg_.channels, H = cfg_.image_h, W = cfg_.image_w, HW = H * W;
  const std::size_t S = cfg_.spatial_tokens();
  std::vector<double> images(count * C * HW, 0.0), meta(count * kMetadataDim);
  std::vector<std::uint8_t> mask;
  mask.reserve(count * S);
  for (std::size_t b = 0; b < count; ++b) {
    RngState rng = RngState(seed_).fork(kSampleStream + first + b);
    std::vector<double> coef(rank_ + 1, 1.0);
    for (std::size_t k = 1; k <= rank_; ++k) coef[k] = 0.5 * rng.normal();
    for (std::size_t c = 0; c < C; ++c) {
      double* dst = &images[(b * C + c) * HW];
      for (std::size_t k = 0; k <= rank_; ++k) {
        double a = coef[k] * loadings_[k * C + c];
        const double* mode = &modes_[k * HW];
        for (std::size_t i = 0; i < HW; ++i) dst[i] += a * mode[i];
      }
    }
    for (std::size_t j = 0; j < kMetadataDim; ++j) meta[b * kMetadataDim + j] = rng.uniform();
    auto m = sample_mask(rng, 1, S, cfg_.mask_ratio);
    mask.insert(mask.end(), m.begin(), m.end());
  }
  Batch out;
  out.images = Tensor::from_vector({count, C, H, W}, std::move(images));
  out.metadata = Tensor::from_vector({count, kMetadataDim}, std::move(meta));
  out.mask = std::move(mask);
  return out;
}

}  // namespace chag
