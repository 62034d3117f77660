#pragma once

#include <cstddef>
#include <string>

#include "dfmad/autodiff.hpp"
#include "dfmad/random.hpp"

namespace dfmad {

// Per-call forward options. Dropout is active only when `training` is set,
// which then requires an rng.
struct ForwardContext {
    bool training = false;
    Rng* rng = nullptr;
};

enum class LoraScaling { Standard, RankStabilised };

std::string to_string(LoraScaling scaling);
LoraScaling parse_lora_scaling(const std::string& text);

struct LoRAConfig {
    std::size_t rank = 4;
    double alpha = 8.0;
    double dropout = 0.2;
    LoraScaling scaling = LoraScaling::RankStabilised;
    bool target_query = true;
    bool target_value = true;

    // alpha / r (standard) or alpha / sqrt(r) (rank-stabilised).
    double scale() const;
    void validate() const;
    // Additionally enforces r <= min(d_in, d_out) / 2.
    void validate_for(std::size_t d_in, std::size_t d_out) const;
};

// Low-rank update on a frozen linear projection:
//   y = W0 x + b0 + s * B A dropout(x)
// with A [r x k], B [d_out x r], W0 [d_out x k]. W0 and b0 are shared with
// the backbone and never trained.
class LoRAAdapter {
public:
    // A ~ N(0, 1/r), B = 0, so B A = 0 at construction.
    LoRAAdapter(Var base_weight, Var base_bias, const LoRAConfig& config, Rng& rng);
    LoRAAdapter(Var base_weight, Var base_bias, const LoRAConfig& config, Tensor a, Tensor b);

    Var forward(const Var& x, const ForwardContext& ctx = {}) const;
    // s * B A dropout(x), without the frozen path.
    Var low_rank_path(const Var& x, const ForwardContext& ctx = {}) const;
    // W0 + s B A.
    Tensor merge() const;

    const Var& a() const noexcept { return a_; }
    const Var& b() const noexcept { return b_; }
    const Var& base_weight() const noexcept { return base_weight_; }
    const Var& base_bias() const noexcept { return base_bias_; }
    const LoRAConfig& config() const noexcept { return config_; }
    double scale() const { return config_.scale(); }
    std::size_t in_features() const noexcept { return base_weight_->value.dim(1); }
    std::size_t out_features() const noexcept { return base_weight_->value.dim(0); }

private:
    Var base_weight_;
    Var base_bias_;
    Var a_;
    Var b_;
    LoRAConfig config_;
};

// Inverted dropout: keeps each element with probability 1 - p and rescales by
// 1 / (1 - p). Identity when not training or p == 0.
Var dropout(const Var& x, double p, const ForwardContext& ctx);

} // namespace dfmad
