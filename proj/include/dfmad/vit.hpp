#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dfmad/archive.hpp"
#include "dfmad/autodiff.hpp"
#include "dfmad/lora.hpp"
#include "dfmad/params.hpp"

namespace dfmad {

struct ViTConfig {
    std::size_t image_size = 32;
    std::size_t patch_size = 8;
    std::size_t channels = 1;
    std::size_t embed_dim = 64;
    std::size_t num_heads = 4;
    std::size_t num_layers = 4;
    double mlp_ratio = 4.0;
    double layer_norm_eps = 1e-6;

    void validate() const;
    std::size_t grid() const { return image_size / patch_size; }
    std::size_t num_patches() const { return grid() * grid(); }
    std::size_t num_tokens() const { return num_patches() + 1; }
    std::size_t patch_dim() const { return channels * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t mlp_dim() const;
    Shape image_shape() const { return {channels, image_size, image_size}; }
};

struct BlockWeights {
    Var ln1_gain, ln1_bias;
    Var query_weight, query_bias;
    Var key_weight, key_bias;
    Var value_weight, value_bias;
    Var out_weight, out_bias;
    Var ln2_gain, ln2_bias;
    Var mlp_in_weight, mlp_in_bias;
    Var mlp_out_weight, mlp_out_bias;
};

// Backbone weights. Random initialisation stands in for a pretrained
// checkpoint; from_archive() is the import path for real weights.
struct EncoderWeights {
    ViTConfig config;
    Var patch_weight; // [embed_dim x patch_dim]
    Var patch_bias;   // [embed_dim]
    Var cls_token;    // [1 x embed_dim]
    Var pos_embedding; // [num_tokens x embed_dim]
    std::vector<BlockWeights> blocks;
    Var final_gain, final_bias;

    static EncoderWeights initialize(const ViTConfig& config, std::uint64_t seed);
    static EncoderWeights from_archive(const ArrayArchive& archive);
    ArrayArchive to_archive() const;

    // Marks every tensor frozen (no gradient) or trainable.
    void set_trainable(bool trainable);
    std::vector<std::pair<std::string, Var>> named_parameters() const;
    ParameterRegistry registry() const;
};

struct LayerAdapters {
    std::optional<LoRAAdapter> query;
    std::optional<LoRAAdapter> value;
};

using AdapterSet = std::vector<LayerAdapters>;

// Fresh Q/V adapters (per the LoRA config targets) for every block.
AdapterSet make_adapters(const EncoderWeights& weights, const LoRAConfig& config, Rng& rng);
ParameterRegistry adapter_registry(const AdapterSet& adapters);
ArrayArchive adapters_to_archive(const AdapterSet& adapters, const LoRAConfig& config);
AdapterSet adapters_from_archive(const ArrayArchive& archive, const EncoderWeights& weights);
LoRAConfig lora_config_from_metadata(const ArrayArchive& archive);

// Rearranges a [C x H x W] image into [num_patches x C*p*p] rows, patches in
// raster order, each row ordered (channel, dy, dx).
Tensor patch_matrix(const Tensor& image, const ViTConfig& config);

// Patch projection, CLS token prepended, positional embeddings added.
Var patchify(const Tensor& image, const EncoderWeights& weights);

// Multi-head self-attention of one block on [T x embed_dim] tokens (already
// normalised). Adapters, when given, replace the Q and V projections.
Var attention(const Var& tokens, const BlockWeights& block, const LayerAdapters* adapters, const ViTConfig& config,
              const ForwardContext& ctx = {});

// Pre-norm transformer block.
Var transformer_block(const Var& tokens, const BlockWeights& block, const LayerAdapters* adapters,
                      const ViTConfig& config, const ForwardContext& ctx = {});

// Full forward pass; returns the final-normed CLS token [embed_dim].
Var encode(const Tensor& image, const EncoderWeights& weights, const AdapterSet* adapters = nullptr,
           const ForwardContext& ctx = {});

// Describes the parameters of a backbone (+ optional per-branch adapters)
// without allocating them.
ParameterRegistry count_encoder_parameters(const ViTConfig& config);
ParameterRegistry count_adapter_parameters(const ViTConfig& config, const LoRAConfig& lora);

} // namespace dfmad
