#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dfmad/dataset_io.hpp"
#include "dfmad/lora.hpp"
#include "dfmad/metrics.hpp"
#include "dfmad/model.hpp"
#include "dfmad/synth.hpp"
#include "dfmad/trainer.hpp"
#include "dfmad/vit.hpp"

namespace dfmad {

enum class ProtocolKind { KnownAttackCross, UnknownAttackLoo, AblationSmad };

std::string to_string(ProtocolKind kind);
ProtocolKind parse_protocol_kind(const std::string& text);

// LoRA hyperparameter grid. By default every axis must stay inside the
// published search domain; `unrestricted` lifts that check.
struct GridAxes {
    std::vector<std::size_t> ranks{2, 4, 8};
    std::vector<double> alphas{4.0, 8.0, 16.0};
    std::vector<double> dropouts{0.2, 0.4};
    bool unrestricted = false;

    void validate() const;
    // Full cartesian product, rank-major, on top of `base` (scaling, targets).
    std::vector<LoRAConfig> expand(const LoRAConfig& base) const;
};

struct DataConfig {
    SynthConfig synth;
    // Pre-generated dataset; when set, no synthetic data is generated.
    std::optional<std::filesystem::path> manifest;
    // Second database for known_attack_cross when `manifest` is used.
    std::optional<std::filesystem::path> cross_manifest;
    ImageFormat image_format = ImageFormat::Binary;
    std::vector<ArtefactModel> train_tools{ArtefactModel::LandmarkLike};
    std::vector<ArtefactModel> test_tools{ArtefactModel::LandmarkLike};
    // Tools enumerated by unknown_attack_loo.
    std::vector<ArtefactModel> loo_tools{ArtefactModel::LandmarkLike, ArtefactModel::DiffusionLike};
    // Acquisition differences of the second synthetic database.
    std::uint64_t cross_seed = 4048;
    double cross_brightness_offset = 0.05;
    double cross_noise_std = 0.03;

    SynthConfig cross_synth() const;
};

struct ExperimentConfig {
    std::string name;
    std::uint64_t seed = 0;
    DetectorMode mode = DetectorMode::Differential;
    std::optional<ProtocolKind> protocol;
    std::filesystem::path output_root;
    ViTConfig vit;
    LoRAConfig lora;
    GridAxes grid;
    unsigned grid_threads = 1;
    TrainConfig train;
    FocalLossConfig focal;
    DataConfig data;
    std::size_t det_resolution = 0;
    bool verbose = true; // progress lines on stderr

    // Parses an INI file. `overrides` are "section.key=value" strings applied
    // on top of the file. Unknown keys and missing required keys
    // (experiment.name, experiment.seed, train.epochs) raise ValidationError.
    static ExperimentConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});
    static ExperimentConfig parse(const std::string& ini_text, const std::vector<std::string>& overrides = {});

    void validate() const;
    // Every effective setting as sorted "section.key=value" lines.
    std::string canonical() const;
    std::string hash() const;
    std::filesystem::path output_dir() const { return output_root / name; }
};

// Source revision baked in at configure time (`git describe --always --dirty`),
// or "unknown" outside a git checkout.
std::string provenance();

// $DFMAD_OUTPUT_ROOT, or "runs" when unset.
std::filesystem::path default_output_root();

// Scores every pair with the model (evaluation mode).
std::vector<ScoreRecord> score_dataset(const DiffoundModel& model, std::span<const PairSample> samples);

// Writes scores.csv, report.txt, det.csv and det.svg into `dir`.
MetricsReport write_evaluation(const std::filesystem::path& dir, std::span<const ScoreRecord> scores,
                               const std::string& title, std::size_t det_resolution);

struct RunSummary {
    std::string label;
    std::string train_on;
    std::string test_on;
    MetricsReport report;
    std::filesystem::path dir;
};

// Train on the configured data, save the model and evaluate on the test split.
RunSummary cmd_train(const ExperimentConfig& config);

// Evaluate a saved model on the configured data's test split (or a manifest).
// Throws CompatibilityError when the data's image shape differs from the
// model's input signature.
RunSummary cmd_eval(const ExperimentConfig& config, const std::filesystem::path& model_dir);

struct GridCell {
    LoRAConfig lora;
    // Cross-database directions: trained on A tested on B, and the reverse.
    MetricsReport a_to_b;
    MetricsReport b_to_a;
    double mean_d_eer = 0.0;
    std::array<double, 3> mean_bscer_at{}; // aligned with kMacerTargets
    std::string error;                     // non-empty when the cell failed
    bool best = false;

    bool ok() const noexcept { return error.empty(); }
};

// Trains every (rank, alpha, dropout) cell in both cross-database directions
// and writes grid.csv. The best row is the lowest mean D-EER over the two
// directions (ties: lower mean BSCER@MACER=10%, then the earlier cell). A
// failed cell is recorded with its error; the call throws only when every
// cell failed.
std::vector<GridCell> cmd_grid(const ExperimentConfig& config);

// Runs the configured protocol and writes protocol.csv.
//   known_attack_cross: train on A and on B, test each model on both.
//   unknown_attack_loo: for each held-out tool, train on the remaining tools
//     and test on the held-out one, once per split direction (train split ->
//     test split, then test split -> train split). Needs >= 2 tools.
//   ablation_smad: differential and single-image models on identical data.
std::vector<RunSummary> cmd_protocol(const ExperimentConfig& config);

// Writes the configured synthetic benchmark to `dir` (manifest + images).
ProtocolSplit cmd_gen_data(const ExperimentConfig& config, const std::filesystem::path& dir);

// Metrics-only mode on an external score CSV.
MetricsReport cmd_metrics(const std::filesystem::path& scores, const std::filesystem::path& out_dir,
                          std::size_t det_resolution);

} // namespace dfmad
