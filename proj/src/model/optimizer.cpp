#include "chag/model/optimizer.hpp"

#include <cmath>

namespace chag {

void Adam::step(ParamStore& params) {
  const auto& tensors = params.tensors();
  if (m_.empty()) {
    m_.resize(tensors.size());
    v_.resize(tensors.size());
    for (std::size_t i = 0; i < tensors.size(); ++i) {
      m_[i].assign(tensors[i].numel(), 0.0);
      v_[i].assign(tensors[i].numel(), 0.0);
    }
  }
  if (m_.size() != tensors.size()) throw ConfigError("Adam: parameter set changed between steps");
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    Tensor p = tensors[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto w = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
      w[j] -= cfg_.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
    }
  }
}

std::size_t Adam::state_numel() const {
  std::size_t n = 0;
  for (const auto& m : m_) n += 2 * m.size();
  return n;
}

}  // namespace chag
