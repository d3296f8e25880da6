#pragma once

#include <cstddef>
#include <cstdint>

#include "chag/model/config.hpp"
#include "chag/model/model.hpp"

namespace chag {

/// Low-rank multi-channel images: a fixed base field plus `rank` random
/// combinations of channel loadings times smooth spatial modes. Sample i
/// (images, metadata and mask) depends only on (seed, i).
class SyntheticDataset {
 public:
  SyntheticDataset(const ModelConfig& cfg, std::uint64_t seed, std::size_t rank = 2);

  Batch batch(std::size_t first_index, std::size_t count) const;

 private:
  ModelConfig cfg_;
  std::uint64_t seed_;
  std::size_t rank_;
  std::vector<double> loadings_;  // [rank + 1, C]
  std::vector<double> modes_;     // [rank + 1, H * W]
};

}  // namespace chag
