#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "dfmad/lora.hpp"
#include "dfmad/params.hpp"
#include "dfmad/sample.hpp"
#include "dfmad/vit.hpp"

namespace dfmad {

enum class DetectorMode { Differential, SingleImage };

std::string to_string(DetectorMode mode);
DetectorMode parse_detector_mode(const std::string& text);

// Dual-stream detector. Both branches run the same frozen backbone (one
// physical copy) with their own LoRA adapters; the head is a single affine map
// embed_dim -> 1 followed by a sigmoid. Higher scores are more morph-like.
//
// In single-image mode only the suspected-image branch exists and the head
// reads its embedding directly.
class DiffoundModel {
public:
    // Frozen backbone from `seed`, fresh adapters (B = 0) per branch, zero head.
    static DiffoundModel build(const ViTConfig& vit, const LoRAConfig& lora, DetectorMode mode, std::uint64_t seed);
    // Same, on top of an existing (e.g. imported) backbone.
    static DiffoundModel build(std::shared_ptr<EncoderWeights> backbone, const LoRAConfig& lora, DetectorMode mode,
                               std::uint64_t seed);

    Var embed_suspected(const Tensor& image, const ForwardContext& ctx = {}) const;
    Var embed_live(const Tensor& image, const ForwardContext& ctx = {}) const;

    // e_l - e_m (or e_m - e_l when reverse_difference is set).
    Var differential_embedding(const PairSample& pair, const ForwardContext& ctx = {}) const;
    Var differential_embedding(const Tensor& suspected, const Tensor& live, const ForwardContext& ctx = {}) const;

    // Pre-sigmoid head output. `live` is ignored (and may be null) in single-image mode.
    Var logit(const Tensor& suspected, const Tensor* live, const ForwardContext& ctx = {}) const;
    Var logit(const PairSample& pair, const ForwardContext& ctx = {}) const;

    // sigmoid(logit) in evaluation mode, in [0, 1].
    double score(const PairSample& pair) const;

    ParameterRegistry registry() const;
    std::vector<Var> trainable_parameters() const;
    std::vector<Var> frozen_parameters() const;

    const ViTConfig& vit_config() const noexcept { return backbone_->config; }
    const LoRAConfig& lora_config() const noexcept { return lora_; }
    DetectorMode mode() const noexcept { return mode_; }
    const EncoderWeights& backbone() const noexcept { return *backbone_; }
    const std::shared_ptr<EncoderWeights>& backbone_ptr() const noexcept { return backbone_; }
    AdapterSet& branch_m() noexcept { return branch_m_; }
    const AdapterSet& branch_m() const noexcept { return branch_m_; }
    AdapterSet& branch_l() noexcept { return branch_l_; }
    const AdapterSet& branch_l() const noexcept { return branch_l_; }
    const Var& head_weight() const noexcept { return head_weight_; }
    const Var& head_bias() const noexcept { return head_bias_; }

    bool reverse_difference = false;

    // Hash of architecture, LoRA config and mode; identifies compatible checkpoints.
    std::string config_hash() const;
    // "<channels>x<size>x<size>", what datasets must match.
    std::string input_signature() const;

    // Directory bundle: manifest.json, backbone.dfa, adapters_m.dfa,
    // adapters_l.dfa (differential mode only), head.dfa.
    void save(const std::filesystem::path& dir) const;
    static DiffoundModel load(const std::filesystem::path& dir);

private:
    DiffoundModel() = default;

    std::shared_ptr<EncoderWeights> backbone_;
    LoRAConfig lora_;
    DetectorMode mode_ = DetectorMode::Differential;
    AdapterSet branch_m_;
    AdapterSet branch_l_;
    Var head_weight_; // [1 x embed_dim]
    Var head_bias_;   // [1]
};

// Parameter accounting for a model that is never allocated (one shared frozen
// backbone, one or two adapter sets, head).
ParameterRegistry count_model_parameters(const ViTConfig& vit, const LoRAConfig& lora, DetectorMode mode);

std::string input_signature(const Shape& image_shape);
std::string fnv1a_hex(const std::string& text);

} // namespace dfmad
