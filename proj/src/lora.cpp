#include "dfmad/lora.hpp"

#include <algorithm>
#include <cmath>

#include "dfmad/error.hpp"

namespace dfmad {

std::string to_string(LoraScaling scaling)
{
    return scaling == LoraScaling::Standard ? "standard" : "rank_stabilised";
}

LoraScaling parse_lora_scaling(const std::string& text)
{
    if (text == "standard") {
        return LoraScaling::Standard;
    }
    if (text == "rank_stabilised" || text == "rslora") {
        return LoraScaling::RankStabilised;
    }
    throw ConfigError("unknown LoRA scaling mode '" + text + "'");
}

double LoRAConfig::scale() const
{
    const double r = static_cast<double>(rank);
    return scaling == LoraScaling::Standard ? alpha / r : alpha / std::sqrt(r);
}

void LoRAConfig::validate() const
{
    if (rank < 1) {
        throw ConfigError("LoRA rank must be >= 1");
    }
    if (!(alpha > 0.0)) {
        throw ConfigError("LoRA alpha must be positive");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) {
        throw ConfigError("LoRA dropout must lie in [0, 1)");
    }
}

void LoRAConfig::validate_for(std::size_t d_in, std::size_t d_out) const
{
    validate();
    if (2 * rank > std::min(d_in, d_out)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " too large for a " + std::to_string(d_out) + "x" +
                          std::to_string(d_in) + " projection (needs r <= min(d_in, d_out) / 2)");
    }
}

Var dropout(const Var& x, double p, const ForwardContext& ctx)
{
    if (!ctx.training || p == 0.0) {
        return x;
    }
    if (ctx.rng == nullptr) {
        throw ContractError("dropout in training mode needs an rng");
    }
    std::bernoulli_distribution keep(1.0 - p);
    Tensor mask(x->value.shape());
    const double kept = 1.0 / (1.0 - p);
    for (double& m : mask.data()) {
        m = keep(*ctx.rng) ? kept : 0.0;
    }
    return mul(x, constant(std::move(mask)));
}

LoRAAdapter::LoRAAdapter(Var base_weight, Var base_bias, const LoRAConfig& config, Rng& rng)
    : base_weight_(std::move(base_weight)), base_bias_(std::move(base_bias)), config_(config)
{
    if (base_weight_->value.rank() != 2) {
        throw ShapeError("LoRA base weight must be a matrix, got " + shape_str(base_weight_->value.shape()));
    }
    config_.validate_for(in_features(), out_features());
    const std::size_t r = config_.rank;
    a_ = parameter(randn({r, in_features()}, 1.0 / std::sqrt(static_cast<double>(r)), rng));
    b_ = parameter(Tensor({out_features(), r}));
}

LoRAAdapter::LoRAAdapter(Var base_weight, Var base_bias, const LoRAConfig& config, Tensor a, Tensor b)
    : base_weight_(std::move(base_weight)), base_bias_(std::move(base_bias)), config_(config)
{
    if (base_weight_->value.rank() != 2) {
        throw ShapeError("LoRA base weight must be a matrix, got " + shape_str(base_weight_->value.shape()));
    }
    config_.validate_for(in_features(), out_features());
    const Shape want_a{config_.rank, in_features()};
    const Shape want_b{out_features(), config_.rank};
    if (a.shape() != want_a || b.shape() != want_b) {
        throw ShapeError("LoRA factors " + shape_str(a.shape()) + " / " + shape_str(b.shape()) + " expected " +
                         shape_str(want_a) + " / " + shape_str(want_b));
    }
    a_ = parameter(std::move(a));
    b_ = parameter(std::move(b));
}

Var LoRAAdapter::low_rank_path(const Var& x, const ForwardContext& ctx) const
{
    const Var dropped = dropout(x, config_.dropout, ctx);
    return dfmad::scale(linear(linear(dropped, a_), b_), config_.scale());
}

Var LoRAAdapter::forward(const Var& x, const ForwardContext& ctx) const
{
    if (x->value.shape().back() != in_features()) {
        throw ShapeError("LoRA input " + shape_str(x->value.shape()) + " does not match base weight " +
                         shape_str(base_weight_->value.shape()));
    }
    return add(linear(x, base_weight_, base_bias_), low_rank_path(x, ctx));
}

Tensor LoRAAdapter::merge() const
{
    const std::size_t d_out = out_features();
    const std::size_t k = in_features();
    const std::size_t r = config_.rank;
    const double s = config_.scale();
    Tensor merged = base_weight_->value;
    for (std::size_t i = 0; i < d_out; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            double delta = 0.0;
            for (std::size_t l = 0; l < r; ++l) {
                delta += b_->value.at(i, l) * a_->value.at(l, j);
            }
            merged.at(i, j) += s * delta;
        }
    }
    return merged;
}

} // namespace dfmad
