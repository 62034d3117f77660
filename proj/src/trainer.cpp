#include "dfmad/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>

#include "dfmad/error.hpp"

namespace dfmad {

void FocalLossConfig::validate() const
{
    if (!(alpha_t >= 0.0 && alpha_t <= 1.0)) {
        throw ConfigError("focal alpha_t must lie in [0, 1]");
    }
    if (!(eta >= 0.0)) {
        throw ConfigError("focal eta must be >= 0");
    }
}

Var focal_loss(const Var& logit, Label label, const FocalLossConfig& config)
{
    config.validate();
    if (logit->value.numel() != 1) {
        throw ShapeError("focal_loss expects a scalar logit, got " + shape_str(logit->value.shape()));
    }
    const bool morph = label == Label::Morph;
    // 1 - sigmoid(z) == sigmoid(-z); the second form avoids cancellation.
    const Var p_t = clamp(sigmoid(morph ? logit : neg(logit)), kFocalClamp, 1.0 - kFocalClamp);
    const double weight = morph ? config.alpha_t : 1.0 - config.alpha_t;
    const Var modulating = pow(add_scalar(neg(p_t), 1.0), config.eta);
    return reshape(scale(mul(modulating, log(p_t)), -weight), Shape{});
}

Var focal_loss(std::span<const Var> logits, std::span<const Label> labels, const FocalLossConfig& config)
{
    if (logits.empty() || logits.size() != labels.size()) {
        throw ContractError("focal_loss: need one label per logit and a non-empty batch");
    }
    Var total = focal_loss(logits[0], labels[0], config);
    for (std::size_t i = 1; i < logits.size(); ++i) {
        total = add(total, focal_loss(logits[i], labels[i], config));
    }
    return scale(total, 1.0 / static_cast<double>(logits.size()));
}

AugmentationFlags AugmentationFlags::none()
{
    AugmentationFlags f;
    f.random_crop = false;
    f.horizontal_flip = false;
    f.photometric = false;
    return f;
}

Tensor augment(const Tensor& image, const AugmentationFlags& flags, Rng& rng)
{
    if (image.rank() != 3) {
        throw ShapeError("augment expects a [C x H x W] image, got " + shape_str(image.shape()));
    }
    const std::size_t channels = image.dim(0);
    const std::size_t height = image.dim(1);
    const std::size_t width = image.dim(2);
    Tensor out = image;

    if (flags.random_crop) {
        const auto pad = static_cast<long>(std::lround(flags.crop_fraction * static_cast<double>(width)));
        if (pad > 0) {
            std::uniform_int_distribution<long> shift(-pad, pad);
            const long dy = shift(rng);
            const long dx = shift(rng);
            const Tensor src = out;
            const auto h = static_cast<long>(height);
            const auto w = static_cast<long>(width);
            for (std::size_t c = 0; c < channels; ++c) {
                for (long y = 0; y < h; ++y) {
                    const long sy = std::clamp(y + dy, 0L, h - 1);
                    for (long x = 0; x < w; ++x) {
                        const long sx = std::clamp(x + dx, 0L, w - 1);
                        out[(c * height + static_cast<std::size_t>(y)) * width + static_cast<std::size_t>(x)] =
                            src[(c * height + static_cast<std::size_t>(sy)) * width + static_cast<std::size_t>(sx)];
                    }
                }
            }
        }
    }

    if (flags.horizontal_flip) {
        std::bernoulli_distribution flip(flags.flip_probability);
        if (flip(rng)) {
            for (std::size_t c = 0; c < channels; ++c) {
                for (std::size_t y = 0; y < height; ++y) {
                    double* line = out.data().data() + (c * height + y) * width;
                    std::reverse(line, line + width);
                }
            }
        }
    }

    if (flags.photometric) {
        std::uniform_real_distribution<double> factor(1.0 - flags.photometric_range, 1.0 + flags.photometric_range);
        const double brightness = factor(rng);
        const double contrast = factor(rng);
        const auto values = out.data();
        const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
        for (double& v : values) {
            v = std::clamp(((v - mean) * contrast + mean) * brightness, 0.0, 1.0);
        }
    }
    return out;
}

BalancedBatcher::BalancedBatcher(std::span<const PairSample> dataset, std::size_t batch_size, std::uint64_t seed)
    : batch_size_(batch_size), rng_(seed)
{
    if (batch_size == 0) {
        throw ConfigError("batch size must be positive");
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        (dataset[i].label() == Label::Morph ? morph_ : bona_fide_).push_back(i);
    }
    if (bona_fide_.empty() || morph_.empty()) {
        throw ProtocolError("balanced sampling needs both classes (" + std::to_string(bona_fide_.size()) +
                            " bona fide, " + std::to_string(morph_.size()) + " morph)");
    }
    const std::size_t per_bf = (batch_size + 1) / 2;
    const std::size_t per_morph = batch_size / 2;
    batches_per_epoch_ = (bona_fide_.size() + per_bf - 1) / per_bf;
    if (per_morph > 0) {
        batches_per_epoch_ = std::max(batches_per_epoch_, (morph_.size() + per_morph - 1) / per_morph);
    }
}

std::size_t BalancedBatcher::draw(std::vector<std::size_t>& pool, std::vector<std::size_t>& queue,
                                  std::size_t& cursor)
{
    if (cursor == queue.size()) {
        queue = pool;
        std::shuffle(queue.begin(), queue.end(), rng_);
        cursor = 0;
    }
    return queue[cursor++];
}

std::vector<std::vector<std::size_t>> BalancedBatcher::next_epoch()
{
    const std::size_t per_bf = (batch_size_ + 1) / 2;
    const std::size_t per_morph = batch_size_ / 2;
    std::vector<std::vector<std::size_t>> epoch(batches_per_epoch_);
    for (auto& batch : epoch) {
        batch.reserve(batch_size_);
        for (std::size_t i = 0; i < per_bf; ++i) {
            batch.push_back(draw(bona_fide_, bona_fide_queue_, bona_fide_cursor_));
        }
        for (std::size_t i = 0; i < per_morph; ++i) {
            batch.push_back(draw(morph_, morph_queue_, morph_cursor_));
        }
    }
    return epoch;
}

std::vector<std::vector<std::size_t>> balanced_batches(std::span<const PairSample> dataset, std::size_t batch_size,
                                                       std::uint64_t seed)
{
    return BalancedBatcher(dataset, batch_size, seed).next_epoch();
}

AdamState AdamState::for_parameters(std::span<const Var> params)
{
    AdamState state;
    for (const auto& p : params) {
        state.first_moment.emplace_back(p->value.shape());
        state.second_moment.emplace_back(p->value.shape());
    }
    return state;
}

void adam_step(std::span<const Var> params, AdamState& state, const AdamConfig& config)
{
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                            " tensors, got " + std::to_string(params.size()) + " parameters");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correction1 = 1.0 - std::pow(config.beta1, t);
    const double correction2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Node& p = *params[i];
        Tensor& m = state.first_moment[i];
        Tensor& v = state.second_moment[i];
        if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
            throw ContractError("adam_step: state shape " + shape_str(m.shape()) + " does not match parameter " +
                                shape_str(p.value.shape()));
        }
        if (p.has_grad() && p.grad.shape() != p.value.shape()) {
            throw ContractError("adam_step: gradient shape " + shape_str(p.grad.shape()) +
                                " does not match parameter " + shape_str(p.value.shape()));
        }
        auto w = p.value.data();
        auto mv = m.data();
        auto vv = v.data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            double g = p.has_grad() ? p.grad[j] : 0.0;
            if (!config.decoupled_weight_decay) {
                g += config.weight_decay * w[j];
            }
            mv[j] = config.beta1 * mv[j] + (1.0 - config.beta1) * g;
            vv[j] = config.beta2 * vv[j] + (1.0 - config.beta2) * g * g;
            const double m_hat = mv[j] / correction1;
            const double v_hat = vv[j] / correction2;
            double update = m_hat / (std::sqrt(v_hat) + config.epsilon);
            if (config.decoupled_weight_decay) {
                update += config.weight_decay * w[j];
            }
            w[j] -= config.learning_rate * update;
        }
    }
}

void TrainConfig::validate() const
{
    if (epochs == 0) {
        throw ConfigError("epochs must be positive");
    }
    if (batch_size == 0) {
        throw ConfigError("batch_size must be positive");
    }
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning_rate must be positive");
    }
    if (!(weight_decay >= 0.0)) {
        throw ConfigError("weight_decay must be >= 0");
    }
}

namespace {

std::string parameter_norms(const DiffoundModel& model)
{
    std::ostringstream out;
    const ParameterRegistry registry = model.registry();
    for (const auto& e : registry.entries()) {
        if (e.trainable) {
            out << "\n  " << e.name << " |w|=" << e.var->value.l2_norm();
        }
    }
    return out.str();
}

std::vector<std::vector<std::size_t>> shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng)
{
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t i = 0; i < n; i += batch_size) {
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                             order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return batches;
}

} // namespace

TrainResult train(DiffoundModel& model, std::span<const PairSample> dataset, const TrainConfig& config,
                  const FocalLossConfig& focal, const EpochCallback& on_epoch)
{
    config.validate();
    focal.validate();
    if (dataset.empty()) {
        throw ProtocolError("training set is empty");
    }
    const bool has_bf = std::any_of(dataset.begin(), dataset.end(),
                                    [](const PairSample& s) { return s.label() == Label::BonaFide; });
    const bool has_morph =
        std::any_of(dataset.begin(), dataset.end(), [](const PairSample& s) { return s.label() == Label::Morph; });
    if (!has_bf || !has_morph) {
        throw ProtocolError("training set must contain both bona fide and morph pairs");
    }

    const std::vector<Var> params = model.trainable_parameters();
    AdamState state = AdamState::for_parameters(params);
    AdamConfig adam;
    adam.learning_rate = config.learning_rate;
    adam.weight_decay = config.weight_decay;

    Rng sample_rng(derive_seed(config.seed, {0xA11}));
    Rng order_rng(derive_seed(config.seed, {0x0DE}));
    std::optional<BalancedBatcher> batcher;
    if (config.balanced_sampling) {
        batcher.emplace(dataset, config.batch_size, derive_seed(config.seed, {0xBA7}));
    }
    const bool differential = model.mode() == DetectorMode::Differential;
    const ForwardContext ctx{true, &sample_rng};

    TrainResult result;
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto batches =
            batcher ? batcher->next_epoch() : shuffled_batches(dataset.size(), config.batch_size, order_rng);
        double epoch_total = 0.0;
        for (std::size_t bi = 0; bi < batches.size(); ++bi) {
            const auto& batch = batches[bi];
            zero_grad(params);
            double batch_total = 0.0;
            try {
                for (std::size_t idx : batch) {
                    const PairSample& sample = dataset[idx];
                    const Tensor suspected = augment(sample.suspected(), config.augmentation, sample_rng);
                    Var logit;
                    if (differential) {
                        const Tensor live = augment(sample.live(), config.augmentation, sample_rng);
                        logit = model.logit(suspected, &live, ctx);
                    } else {
                        logit = model.logit(suspected, nullptr, ctx);
                    }
                    const Var loss = focal_loss(logit, sample.label(), focal);
                    backward(scale(loss, 1.0 / static_cast<double>(batch.size())));
                    batch_total += loss->value.item();
                }
            } catch (const NumericError& e) {
                throw NumericError("training diverged in epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(bi) + ": " + e.what() + parameter_norms(model));
            }
            const double batch_mean = batch_total / static_cast<double>(batch.size());
            if (!std::isfinite(batch_mean)) {
                throw NumericError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(bi) + parameter_norms(model));
            }
            adam_step(params, state, adam);
            epoch_total += batch_mean;
        }
        const double epoch_mean = epoch_total / static_cast<double>(batches.size());
        result.epoch_losses.push_back(epoch_mean);
        if (on_epoch) {
            on_epoch(epoch, epoch_mean);
        }
    }
    zero_grad(params);
    return result;
}

} // namespace dfmad
