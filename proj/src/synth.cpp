#include "dfmad/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dfmad/error.hpp"

namespace dfmad {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kIdentityStream = 0x1D;
constexpr std::uint64_t kCaptureStream = 0xCA;
constexpr std::uint64_t kMorphJitterStream = 0x3A;
constexpr std::uint64_t kMorphNoiseStream = 0x3B;
constexpr std::uint64_t kArtefactStream = 0x3C;
constexpr std::uint64_t kPartnerStream = 0x9A;
constexpr std::uint64_t kSplitStream = 0x5B;

constexpr std::size_t kWaves = 4;
constexpr std::size_t kBlobs = 6;

double uniform01(Rng& rng)
{
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

double uniform_in(Rng& rng, double lo, double hi)
{
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

void add_noise(Tensor& image, double stddev, Rng& rng)
{
    if (stddev <= 0.0) {
        return;
    }
    std::normal_distribution<double> noise(0.0, stddev);
    for (double& v : image.data()) {
        v += noise(rng);
    }
}

void clamp_unit(Tensor& image)
{
    for (double& v : image.data()) {
        v = std::clamp(v, 0.0, 1.0);
    }
}

double mean_of(const Tensor& t)
{
    double s = 0.0;
    for (double v : t.data()) {
        s += v;
    }
    return s / static_cast<double>(t.numel());
}

double stddev_of(const Tensor& t)
{
    const double m = mean_of(t);
    double s = 0.0;
    for (double v : t.data()) {
        s += (v - m) * (v - m);
    }
    return std::sqrt(s / static_cast<double>(t.numel()));
}

// Separable [1 2 1]/4 blur per channel with edge replication.
Tensor blur(const Tensor& image)
{
    const std::size_t channels = image.dim(0);
    const std::size_t h = image.dim(1);
    const std::size_t w = image.dim(2);
    Tensor tmp(image.shape());
    Tensor out(image.shape());
    auto idx = [&](std::size_t c, std::size_t y, std::size_t x) { return (c * h + y) * w + x; };
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                const std::size_t xl = x == 0 ? 0 : x - 1;
                const std::size_t xr = x + 1 == w ? x : x + 1;
                tmp[idx(c, y, x)] =
                    0.25 * image[idx(c, y, xl)] + 0.5 * image[idx(c, y, x)] + 0.25 * image[idx(c, y, xr)];
            }
        }
        for (std::size_t y = 0; y < h; ++y) {
            const std::size_t yu = y == 0 ? 0 : y - 1;
            const std::size_t yd = y + 1 == h ? y : y + 1;
            for (std::size_t x = 0; x < w; ++x) {
                out[idx(c, y, x)] =
                    0.25 * tmp[idx(c, yu, x)] + 0.5 * tmp[idx(c, y, x)] + 0.25 * tmp[idx(c, yd, x)];
            }
        }
    }
    return out;
}

double pattern_at(const Identity& identity, double u, double v)
{
    double pattern = 0.0;
    for (const auto& wave : identity.waves) {
        pattern += wave.amplitude * std::cos(2.0 * std::numbers::pi * (wave.fx * u + wave.fy * v) + wave.phase);
    }
    for (const auto& blob : identity.blobs) {
        const double du = u - blob.cx;
        const double dv = v - blob.cy;
        pattern += blob.amplitude * std::exp(-(du * du + dv * dv) / (2.0 * blob.sigma * blob.sigma));
    }
    return pattern;
}

void check_partner(const Identity& a, const Identity& b)
{
    if (a.id == b.id) {
        throw ContractError("morph contributors must be different identities (both are " + std::to_string(a.id) +
                            ")");
    }
}

} // namespace

std::string to_string(ArtefactModel model)
{
    switch (model) {
    case ArtefactModel::LandmarkLike:
        return "landmark_like";
    case ArtefactModel::DiffusionLike:
        return "diffusion_like";
    }
    return "unknown";
}

ArtefactModel parse_artefact_model(const std::string& text)
{
    if (text == "landmark_like") {
        return ArtefactModel::LandmarkLike;
    }
    if (text == "diffusion_like") {
        return ArtefactModel::DiffusionLike;
    }
    throw ValidationError("unknown artefact model '" + text + "' (expected landmark_like or diffusion_like)");
}

std::vector<ArtefactModel> all_artefact_models()
{
    return {ArtefactModel::LandmarkLike, ArtefactModel::DiffusionLike};
}

void SynthConfig::validate() const
{
    if (image_size < 4) {
        throw ConfigError("synth image_size must be at least 4");
    }
    if (channels == 0) {
        throw ConfigError("synth channels must be positive");
    }
    if (captures_per_identity < 2) {
        throw ConfigError("synth captures_per_identity must be at least 2 to form bona fide pairs");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ConfigError("synth beta must lie in [0, 1]");
    }
    if (ghost_shift < 0.0 || texture_amplitude < 0.0) {
        throw ConfigError("synth ghost_shift and texture_amplitude must be non-negative");
    }
    if (artefact_strength < 0.0 || noise_std < 0.0 || pose_jitter < 0.0 || illumination_jitter < 0.0) {
        throw ConfigError("synth strengths and jitter scales must be non-negative");
    }
    if (contrast_jitter < 0.0 || contrast_jitter >= 1.0) {
        throw ConfigError("synth contrast_jitter must lie in [0, 1)");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ConfigError("synth test_fraction must lie in (0, 1)");
    }
}

Identity make_identity(std::size_t id, const SynthConfig& config)
{
    Rng rng(derive_seed(config.seed, {kIdentityStream, id}));
    Identity identity;
    identity.id = id;
    identity.brightness = uniform_in(rng, 0.4, 0.6);
    std::uniform_int_distribution<int> freq(-3, 3);
    for (std::size_t i = 0; i < kWaves; ++i) {
        Identity::Wave wave{};
        do {
            wave.fx = freq(rng);
            wave.fy = freq(rng);
        } while (wave.fx == 0 && wave.fy == 0);
        wave.amplitude = uniform_in(rng, 0.045, 0.11);
        wave.phase = uniform_in(rng, 0.0, 2.0 * std::numbers::pi);
        identity.waves.push_back(wave);
    }
    for (std::size_t i = 0; i < kBlobs; ++i) {
        Identity::Blob blob{};
        blob.cx = uniform_in(rng, 0.2, 0.8);
        blob.cy = uniform_in(rng, 0.2, 0.8);
        blob.sigma = uniform_in(rng, 0.06, 0.14);
        blob.amplitude = uniform_in(rng, -0.3, 0.3);
        identity.blobs.push_back(blob);
    }
    identity.channel_gain.assign(config.channels, 1.0);
    for (std::size_t c = 1; c < config.channels; ++c) {
        identity.channel_gain[c] = uniform_in(rng, 0.85, 1.15);
    }
    return identity;
}

CaptureJitter draw_jitter(const SynthConfig& config, Rng& rng)
{
    std::normal_distribution<double> normal(0.0, 1.0);
    CaptureJitter jitter;
    jitter.dx = config.pose_jitter * normal(rng);
    jitter.dy = config.pose_jitter * normal(rng);
    jitter.contrast = 1.0 + config.contrast_jitter * (2.0 * uniform01(rng) - 1.0);
    jitter.brightness = config.illumination_jitter * normal(rng);
    return jitter;
}

Tensor render(const Identity& identity, const CaptureJitter& jitter, const SynthConfig& config)
{
    const std::size_t s = config.image_size;
    const double size = static_cast<double>(s);
    Tensor image(config.image_shape());
    for (std::size_t y = 0; y < s; ++y) {
        const double v = (static_cast<double>(y) + 0.5 - jitter.dy) / size;
        for (std::size_t x = 0; x < s; ++x) {
            const double u = (static_cast<double>(x) + 0.5 - jitter.dx) / size;
            double pattern = pattern_at(identity, u, v);
            if (config.mirror_symmetric) {
                pattern = 0.5 * (pattern + pattern_at(identity, 1.0 - u, v));
            }
            for (std::size_t c = 0; c < config.channels; ++c) {
                const double value = identity.brightness + config.brightness_offset + jitter.brightness +
                                     jitter.contrast * identity.channel_gain[c] * pattern;
                image[(c * s + y) * s + x] = value;
            }
        }
    }
    return image;
}

Tensor capture(const Identity& identity, std::size_t index, const SynthConfig& config)
{
    Rng rng(derive_seed(config.seed, {kCaptureStream, identity.id, index}));
    const CaptureJitter jitter = draw_jitter(config, rng);
    Tensor image = render(identity, jitter, config);
    add_noise(image, config.noise_std, rng);
    clamp_unit(image);
    return image;
}

PairSample make_bona_fide_pair(const Identity& identity, std::size_t suspected_index, std::size_t live_index,
                               const SynthConfig& config)
{
    if (config.captures_per_identity < 2) {
        throw ProtocolError("identity " + std::to_string(identity.id) +
                            " needs at least 2 captures for a bona fide pair");
    }
    if (suspected_index == live_index) {
        throw ContractError("bona fide pair needs two different captures");
    }
    if (suspected_index >= config.captures_per_identity || live_index >= config.captures_per_identity) {
        throw ProtocolError("capture index out of range for identity " + std::to_string(identity.id));
    }
    std::string id = "bf-" + std::to_string(identity.id) + "-" + std::to_string(suspected_index) + "-" +
                     std::to_string(live_index);
    return PairSample(std::move(id), capture(identity, suspected_index, config), capture(identity, live_index, config),
                      Label::BonaFide, kBonaFideTag);
}

PairSample make_morph_pair(const Identity& a, const Identity& b, std::size_t morph_index, std::size_t live_index,
                           ArtefactModel model, const SynthConfig& config)
{
    check_partner(a, b);
    Rng jitter_rng(derive_seed(config.seed, {kMorphJitterStream, a.id, b.id, morph_index}));
    const CaptureJitter jitter_a = draw_jitter(config, jitter_rng);
    const CaptureJitter jitter_b = draw_jitter(config, jitter_rng);
    const Tensor image_a = render(a, jitter_a, config);
    const Tensor image_b = render(b, jitter_b, config);

    const double beta = config.beta;
    const double strength = config.artefact_strength;
    Tensor suspected(config.image_shape());
    for (std::size_t i = 0; i < suspected.numel(); ++i) {
        suspected[i] = beta * image_a[i] + (1.0 - beta) * image_b[i];
    }

    Rng artefact_rng(derive_seed(config.seed, {kArtefactStream, a.id, b.id, morph_index}));
    if (strength > 0.0 && model == ArtefactModel::LandmarkLike) {
        // Hard-edged region where contributor b was warped with a misaligned
        // landmark: its content appears twice, plus pixel-grid resampling texture.
        const std::size_t s = config.image_size;
        const std::size_t extent = std::max<std::size_t>(2, s / 2);
        std::uniform_int_distribution<std::size_t> origin(0, s - extent);
        const std::size_t x0 = origin(artefact_rng);
        const std::size_t y0 = origin(artefact_rng);
        const double angle = uniform_in(artefact_rng, 0.0, 2.0 * std::numbers::pi);
        CaptureJitter ghost = jitter_b;
        ghost.dx += config.ghost_shift * std::cos(angle);
        ghost.dy += config.ghost_shift * std::sin(angle);
        const Tensor image_ghost = render(b, ghost, config);
        for (std::size_t c = 0; c < config.channels; ++c) {
            for (std::size_t y = y0; y < y0 + extent; ++y) {
                for (std::size_t x = x0; x < x0 + extent; ++x) {
                    const std::size_t i = (c * s + y) * s + x;
                    const double ghosting = (1.0 - beta) * (image_ghost[i] - image_b[i]);
                    const double texture = ((x + y) % 2 == 0) ? config.texture_amplitude : -config.texture_amplitude;
                    suspected[i] += strength * (ghosting + texture);
                }
            }
        }
    } else if (strength > 0.0 && model == ArtefactModel::DiffusionLike) {
        // Smooth re-synthesis: low-pass the blend, then restore the contrast
        // the averaging removed.
        const double target = 0.5 * (stddev_of(image_a) + stddev_of(image_b));
        Tensor smooth = blur(suspected);
        const double m = mean_of(smooth);
        const double sd = stddev_of(smooth);
        const double gain = sd > 0.0 ? target / sd : 1.0;
        const double mix = std::min(strength, 1.0);
        for (std::size_t i = 0; i < suspected.numel(); ++i) {
            const double restored = m + gain * (smooth[i] - m);
            suspected[i] = (1.0 - mix) * suspected[i] + mix * restored;
        }
    }

    Rng noise_rng(derive_seed(config.seed, {kMorphNoiseStream, a.id, b.id, morph_index}));
    add_noise(suspected, config.noise_std, noise_rng);
    clamp_unit(suspected);

    std::string tag = to_string(model);
    std::string id = "m-" + tag + "-" + std::to_string(a.id) + "-" + std::to_string(b.id) + "-" +
                     std::to_string(morph_index);
    return PairSample(std::move(id), std::move(suspected), capture(a, live_index, config), Label::Morph,
                      std::move(tag));
}

SplitCounts ProtocolSplit::train_counts() const
{
    SplitCounts counts;
    for (const auto& s : train) {
        (s.label() == Label::Morph ? counts.morph : counts.bona_fide) += 1;
    }
    return counts;
}

SplitCounts ProtocolSplit::test_counts() const
{
    SplitCounts counts;
    for (const auto& s : test) {
        (s.label() == Label::Morph ? counts.morph : counts.bona_fide) += 1;
    }
    return counts;
}

SplitCounts expected_counts(const SynthConfig& config, std::size_t identities, std::size_t artefact_models)
{
    const std::size_t c = config.captures_per_identity;
    return {identities * c * (c - 1) / 2, identities * config.morphs_per_identity * artefact_models};
}

namespace {

std::vector<PairSample> generate_split(const std::vector<std::size_t>& ids, const std::vector<Identity>& identities,
                                       const std::vector<ArtefactModel>& models, const SynthConfig& config)
{
    std::vector<PairSample> samples;
    for (std::size_t id : ids) {
        const Identity& identity = identities[id];
        for (std::size_t i = 0; i < config.captures_per_identity; ++i) {
            for (std::size_t j = i + 1; j < config.captures_per_identity; ++j) {
                samples.push_back(make_bona_fide_pair(identity, i, j, config));
            }
        }
    }
    for (std::size_t id : ids) {
        for (std::size_t k = 0; k < config.morphs_per_identity; ++k) {
            Rng partner_rng(derive_seed(config.seed, {kPartnerStream, id, k}));
            std::uniform_int_distribution<std::size_t> pick(0, ids.size() - 2);
            std::size_t partner = ids[pick(partner_rng)];
            if (partner == id) {
                partner = ids.back();
            }
            const std::size_t live_index = k % config.captures_per_identity;
            for (ArtefactModel model : models) {
                samples.push_back(make_morph_pair(identities[id], identities[partner], k, live_index, model, config));
            }
        }
    }
    return samples;
}

} // namespace

ProtocolSplit build_protocol(const SynthConfig& config, const ProtocolOptions& options)
{
    config.validate();
    if (config.num_identities < 4) {
        throw ProtocolError("protocol needs at least 4 identities, got " + std::to_string(config.num_identities));
    }
    if (options.train_artefacts.empty() || options.test_artefacts.empty()) {
        throw ProtocolError("protocol needs at least one artefact model per split");
    }

    std::vector<std::size_t> order(config.num_identities);
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng split_rng(derive_seed(config.seed, {kSplitStream}));
    std::shuffle(order.begin(), order.end(), split_rng);
    auto n_test = static_cast<std::size_t>(std::lround(config.test_fraction * static_cast<double>(order.size())));
    n_test = std::clamp<std::size_t>(n_test, 2, order.size() - 2);

    ProtocolSplit split;
    split.test_identities.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    split.train_identities.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(split.test_identities.begin(), split.test_identities.end());
    std::sort(split.train_identities.begin(), split.train_identities.end());

    std::vector<Identity> identities;
    identities.reserve(config.num_identities);
    for (std::size_t id = 0; id < config.num_identities; ++id) {
        identities.push_back(make_identity(id, config));
    }
    split.train = generate_split(split.train_identities, identities, options.train_artefacts, config);
    split.test = generate_split(split.test_identities, identities, options.test_artefacts, config);
    return split;
}

std::vector<LeaveOneOutRun> leave_one_out_runs(const std::vector<ArtefactModel>& models)
{
    std::vector<ArtefactModel> unique;
    for (ArtefactModel m : models) {
        if (std::find(unique.begin(), unique.end(), m) == unique.end()) {
            unique.push_back(m);
        }
    }
    if (unique.size() < 2) {
        throw ProtocolError("leave-one-out needs at least 2 distinct artefact models");
    }
    std::vector<LeaveOneOutRun> runs;
    for (ArtefactModel held_out : unique) {
        LeaveOneOutRun run;
        run.held_out = held_out;
        for (ArtefactModel m : unique) {
            if (m != held_out) {
                run.train.push_back(m);
            }
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

} // namespace dfmad
