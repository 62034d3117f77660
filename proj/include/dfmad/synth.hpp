#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dfmad/random.hpp"
#include "dfmad/sample.hpp"
#include "dfmad/tensor.hpp"

namespace dfmad {

// How the suspected image of a morph pair is produced.
//   landmark_like:  blend plus localised ghosting (a misaligned copy of one
//                   contributor) and resampling texture inside a hard-edged
//                   region.
//   diffusion_like: blend, smoothed and contrast-restored; no local artefacts.
enum class ArtefactModel { LandmarkLike, DiffusionLike };

std::string to_string(ArtefactModel model);
ArtefactModel parse_artefact_model(const std::string& text);
std::vector<ArtefactModel> all_artefact_models();

struct SynthConfig {
    std::size_t image_size = 32;
    std::size_t channels = 1;
    std::size_t num_identities = 48;
    std::size_t captures_per_identity = 4;
    std::size_t morphs_per_identity = 4; // per artefact model
    double beta = 0.5;                   // weight of the accomplice (identity a) in the blend
    double artefact_strength = 1.0;
    double ghost_shift = 3.0;         // landmark_like: misalignment of the duplicated contributor, pixels
    double texture_amplitude = 0.035; // landmark_like: pixel-grid resampling texture
    double noise_std = 0.02;
    double pose_jitter = 1.0;        // capture shift std-dev, pixels
    double contrast_jitter = 0.1;    // capture contrast factor drawn from [1 - c, 1 + c]
    double illumination_jitter = 0.04; // capture brightness offset std-dev
    double brightness_offset = 0.0;  // acquisition-wide offset (distinguishes databases)
    bool mirror_symmetric = true;    // identities are left-right symmetric, like faces
    double test_fraction = 0.25;
    std::uint64_t seed = 2024;

    void validate() const;
    Shape image_shape() const { return {channels, image_size, image_size}; }
};

// Seeded low-frequency "face" pattern: a few cosine waves plus Gaussian blobs.
struct Identity {
    struct Wave {
        double fx, fy, amplitude, phase;
    };
    struct Blob {
        double cx, cy, sigma, amplitude;
    };
    std::size_t id = 0;
    double brightness = 0.5;
    std::vector<Wave> waves;
    std::vector<Blob> blobs;
    std::vector<double> channel_gain;
};

Identity make_identity(std::size_t id, const SynthConfig& config);

// Per-capture nuisance parameters.
struct CaptureJitter {
    double dx = 0.0;
    double dy = 0.0;
    double contrast = 1.0;
    double brightness = 0.0;
};

CaptureJitter draw_jitter(const SynthConfig& config, Rng& rng);

// Noise-free, unclamped rendering of an identity under a jitter.
Tensor render(const Identity& identity, const CaptureJitter& jitter, const SynthConfig& config);

// Capture `index` of an identity: jittered rendering plus pixel noise, clamped
// to [0, 1]. Deterministic in (identity, index, config.seed).
Tensor capture(const Identity& identity, std::size_t index, const SynthConfig& config);

// Suspected = capture i, live = capture j (i != j) of the same identity.
PairSample make_bona_fide_pair(const Identity& identity, std::size_t suspected_index, std::size_t live_index,
                               const SynthConfig& config);

// Suspected = beta * a + (1 - beta) * b + artefacts; live = capture of a.
// `morph_index` selects the random stream; jitter and noise streams do not
// depend on the artefact model, so two models at the same index differ only
// in the artefact.
PairSample make_morph_pair(const Identity& a, const Identity& b, std::size_t morph_index, std::size_t live_index,
                           ArtefactModel model, const SynthConfig& config);

struct ProtocolOptions {
    std::vector<ArtefactModel> train_artefacts{ArtefactModel::LandmarkLike};
    std::vector<ArtefactModel> test_artefacts{ArtefactModel::LandmarkLike};
};

struct SplitCounts {
    std::size_t bona_fide = 0;
    std::size_t morph = 0;
};

struct ProtocolSplit {
    std::vector<PairSample> train;
    std::vector<PairSample> test;
    std::vector<std::size_t> train_identities;
    std::vector<std::size_t> test_identities;

    SplitCounts train_counts() const;
    SplitCounts test_counts() const;
};

// Identity-disjoint train/test split. Every identity contributes all its
// capture pairs (i < j) as bona fides and morphs_per_identity morphs per
// artefact model, with partners drawn from the same split.
ProtocolSplit build_protocol(const SynthConfig& config, const ProtocolOptions& options = {});

// Expected per-split counts for a config, from arithmetic alone.
SplitCounts expected_counts(const SynthConfig& config, std::size_t identities, std::size_t artefact_models);

struct LeaveOneOutRun {
    std::vector<ArtefactModel> train;
    ArtefactModel held_out;
};

// One run per artefact model: train on all others, test on the held-out one.
std::vector<LeaveOneOutRun> leave_one_out_runs(const std::vector<ArtefactModel>& models);

} // namespace dfmad
