#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "chag/model/config.hpp"
#include "chag/model/layers.hpp"
#include "chag/model/params.hpp"
#include "chag/tensor/rng.hpp"
#include "chag/tensor/tensor.hpp"

namespace chag {

struct Batch {
  Tensor images;                    // [B, C, H, W]
  Tensor metadata;                  // [B, kMetadataDim]
  std::vector<std::uint8_t> mask;   // [B * S], nonzero = masked token

  std::size_t size() const { return images.defined() ? images.size(0) : 0; }
};

Batch concat_batches(const Batch& a, const Batch& b);

/// Masked tokens per sample; never less than one.
std::size_t masked_count(std::size_t spatial_tokens, double mask_ratio);
/// Uniform subset of masked_count() positions for each of `batch` samples.
std::vector<std::uint8_t> sample_mask(RngState& rng, std::size_t batch, std::size_t spatial_tokens,
                                      double mask_ratio);

struct TokenizerWeights {
  Tensor weight;         // [c, P*P, D]
  Tensor bias;           // [c, D]
  Tensor channel_embed;  // [c, D]
  Tensor pos_embed;      // [S, D]
};

/// Tokenizer weights for channels [begin, end). Uses the stored tensors as
/// they are when they already hold exactly that many channels (a rank's local
/// slab), otherwise slices the full set.
TokenizerWeights tokenizer_weights(const ParamStore& params, std::size_t begin, std::size_t end);

/// images [B, c, H, W] -> tokens [B, c, S, D].
Tensor tokenize_channels(const Tensor& images, const TokenizerWeights& w, std::size_t patch);

/// tokens [B, G, S, D] -> [B, 1, S, D] through one aggregation layer.
Tensor flat_aggregate(const Tensor& tokens, const ParamStore& params, AggVariant variant,
                      std::size_t heads, TpComm& comm = serial_comm(),
                      const std::string& prefix = std::string(kFlatAggPrefix),
                      const std::string& tag = "agg.flat");

/// tokens [B, c, S, D] -> [B, 1, S, D] through the tree owned by `slab`.
Tensor tree_aggregate(const Tensor& tokens, const TreeSpec& spec, AggLayerKind kind,
                      AggVariant variant, std::size_t heads, const ParamStore& params,
                      std::size_t slab);

/// Aggregation of all channels of `images` on one process.
Tensor aggregate_channels(const Architecture& arch, const ParamStore& params, const Tensor& images);

/// tokens [B, 1, S, D], metadata [B, 4] -> [B, S+1, D]; the metadata token
/// is at position 0.
Tensor vit_forward(const Tensor& tokens, const Tensor& metadata, const ParamStore& params,
                   const ModelConfig& cfg, TpComm& comm = serial_comm());

/// images [B, C, H, W] -> per-patch pixels of all channels [B, S, C*P*P].
Tensor patch_targets(const Tensor& images, std::size_t patch);

/// encoded [B, S+1, D] -> reconstruction [B, S, C*P*P].
Tensor decoder_forward(const Tensor& encoded, const ParamStore& params, const ModelConfig& cfg);

/// Everything after aggregation: masking, ViT, decoder and masked MSE.
Tensor mae_head_loss(const Tensor& aggregated, const Batch& batch, const ParamStore& params,
                     const ModelConfig& cfg, TpComm& comm = serial_comm());

Tensor mae_loss(const Architecture& arch, const ParamStore& params, const Batch& batch);

}  // namespace chag
