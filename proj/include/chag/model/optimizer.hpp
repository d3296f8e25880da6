#pragma once

#include <cstddef>
#include <vector>

#include "chag/model/params.hpp"

namespace chag {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Keeps two moment buffers per parameter.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter that holds a gradient.
  void step(ParamStore& params);
  std::size_t steps() const { return t_; }
  std::size_t state_numel() const;

 private:
  AdamConfig cfg_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace chag
