#include "chag/cost/presets.hpp"

#include "chag/tensor/tensor.hpp"

namespace chag {

namespace {

struct Preset {
  const char* name;
  std::size_t embed, depth, heads, image_h, image_w;
};

constexpr Preset kPresets[] = {
    {"1.7b", 2048, 34, 16, 128, 96},
    {"7b", 4096, 32, 32, 128, 128},
    {"15b", 6144, 32, 32, 128, 128},
    {"26b", 8192, 32, 32, 128, 128},
};

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : kPresets) out.emplace_back(p.name);
  return out;
}

ModelConfig preset_model(std::string_view name, std::size_t channels) {
  for (const auto& p : kPresets) {
    if (name != p.name) continue;
    ModelConfig m;
    m.channels = channels;
    m.image_h = p.image_h;
    m.image_w = p.image_w;
    m.patch = 4;
    m.embed = p.embed;
    m.depth = p.depth;
    m.heads = p.heads;
    m.mlp_ratio = 4;
    m.agg_variant = AggVariant::full_cross;
    m.decoder_depth = 2;
    m.decoder_dim = 512;
    m.decoder_heads = 8;
    return m;
  }
  throw ConfigError("unknown model preset '" + std::string(name) + "'");
}

}  // namespace chag
