#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "chag/model/config.hpp"

namespace chag {

/// Full-scale model families. "1.7b" is a surrogate (the exact
/// hyperparameters of that model are not published): D=2048, 34 layers
/// (about 1.7e9 encoder parameters), 16 heads. The others use the published
/// embed/layers/heads.
ModelConfig preset_model(std::string_view name, std::size_t channels);
std::vector<std::string> preset_names();

/// Bytes per parameter, gradient and activation element for full-scale
/// estimates (mixed precision).
inline constexpr std::size_t kMixedPrecisionBytes = 2;

}  // namespace chag
