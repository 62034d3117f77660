#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "dfmad/autodiff.hpp"
#include "dfmad/model.hpp"
#include "dfmad/random.hpp"
#include "dfmad/sample.hpp"

namespace dfmad {

struct FocalLossConfig {
    double alpha_t = 0.25; // weight of the morph class; bona fides get 1 - alpha_t
    double eta = 2.0;      // focusing exponent

    void validate() const;
};

inline constexpr double kFocalClamp = 1e-12;

// -a_t (1 - p_t)^eta log(p_t) for one logit, where p_t = sigmoid(logit) for a
// morph and 1 - sigmoid(logit) for a bona fide. p_t is clamped to
// [1e-12, 1 - 1e-12].
Var focal_loss(const Var& logit, Label label, const FocalLossConfig& config);
// Mean over a batch of scalar logits.
Var focal_loss(std::span<const Var> logits, std::span<const Label> labels, const FocalLossConfig& config);

struct AugmentationFlags {
    bool random_crop = true;
    bool horizontal_flip = true;
    bool photometric = true;
    double crop_fraction = 0.1;     // max shift of the pad-and-crop, as a fraction of the side
    double flip_probability = 0.5;
    double photometric_range = 0.2; // brightness and contrast factors drawn from [1 - r, 1 + r]

    static AugmentationFlags none();
};

// Pad-and-crop (edge replication), horizontal flip and brightness/contrast
// jitter on a [C x H x W] image. Output shape always equals input shape.
Tensor augment(const Tensor& image, const AugmentationFlags& flags, Rng& rng);

// Epoch of class-balanced batches (indices into the dataset). Each batch holds
// ceil(b/2) bona fides and floor(b/2) morphs. Each class is drawn from its own
// shuffled queue, reshuffled when exhausted, so the minority class is
// resampled; the epoch ends once the larger class has been covered.
class BalancedBatcher {
public:
    BalancedBatcher(std::span<const PairSample> dataset, std::size_t batch_size, std::uint64_t seed);

    std::size_t batches_per_epoch() const noexcept { return batches_per_epoch_; }
    std::vector<std::vector<std::size_t>> next_epoch();

private:
    std::size_t draw(std::vector<std::size_t>& pool, std::vector<std::size_t>& queue, std::size_t& cursor);

    std::vector<std::size_t> bona_fide_;
    std::vector<std::size_t> morph_;
    std::vector<std::size_t> bona_fide_queue_;
    std::vector<std::size_t> morph_queue_;
    std::size_t bona_fide_cursor_ = 0;
    std::size_t morph_cursor_ = 0;
    std::size_t batch_size_;
    std::size_t batches_per_epoch_ = 0;
    Rng rng_;
};

std::vector<std::vector<std::size_t>> balanced_batches(std::span<const PairSample> dataset, std::size_t batch_size,
                                                       std::uint64_t seed);

struct AdamConfig {
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    bool decoupled_weight_decay = true;
};

struct AdamState {
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
    std::uint64_t step = 0;

    static AdamState for_parameters(std::span<const Var> params);
};

// One Adam update on `params` using their accumulated grads (a missing grad
// counts as zero). Weight decay is decoupled by default:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
void adam_step(std::span<const Var> params, AdamState& state, const AdamConfig& config);

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 16;
    double learning_rate = 1e-4;
    double weight_decay = 0.01;
    std::uint64_t seed = 7;
    AugmentationFlags augmentation;
    bool balanced_sampling = true;

    void validate() const;
};

struct TrainResult {
    std::vector<double> epoch_losses;
};

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

// Focal-loss training of the adapters and head. Frozen backbone tensors are
// never updated. Deterministic for a fixed seed on one thread. Throws
// NumericError (with batch index and parameter norms) if the loss diverges.
TrainResult train(DiffoundModel& model, std::span<const PairSample> dataset, const TrainConfig& config,
                  const FocalLossConfig& focal, const EpochCallback& on_epoch = {});

} // namespace dfmad
