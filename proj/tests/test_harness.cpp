#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include <unistd.h>

#include "dfmad/error.hpp"
#include "dfmad/harness.hpp"

using namespace dfmad;
namespace fs = std::filesystem;

namespace {

const char* kMinimal = R"(
[experiment]
name = unit
seed = 3

[train]
epochs = 2
)";

std::string tiny_ini(const fs::path& root)
{
    return "[experiment]\nname = tiny\nseed = 5\nverbose = false\noutput_root = " + root.string() +
           "\n[model]\nimage_size = 16\npatch_size = 8\nembed_dim = 16\nnum_heads = 2\nnum_layers = 1\n"
           "mlp_ratio = 2\n[lora]\nrank = 2\nalpha = 4\n[train]\nepochs = 1\nbatch_size = 8\n"
           "[data]\nnum_identities = 8\ncaptures_per_identity = 3\nmorphs_per_identity = 2\n";
}

class HarnessDir : public ::testing::Test {
protected:
    void SetUp() override
    {
        root_ = fs::temp_directory_path() /
                ("dfmad_harness_" + std::to_string(::getpid()) + "_" +
                 ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(root_);
    }
    void TearDown() override { fs::remove_all(root_); }

    fs::path root_;
};

} // namespace

TEST(Config, MinimalFileUsesDefaults)
{
    const auto c = ExperimentConfig::parse(kMinimal);
    EXPECT_EQ(c.name, "unit");
    EXPECT_EQ(c.seed, 3u);
    EXPECT_EQ(c.train.epochs, 2u);
    EXPECT_EQ(c.mode, DetectorMode::Differential);
    EXPECT_FALSE(c.protocol.has_value());
    EXPECT_EQ(c.vit.embed_dim, 64u);
    EXPECT_EQ(c.lora.scaling, LoraScaling::RankStabilised);
    EXPECT_EQ(c.train.learning_rate, 1e-4);
    EXPECT_EQ(c.focal.alpha_t, 0.25);
    EXPECT_EQ(c.data.synth.image_size, c.vit.image_size);
}

TEST(Config, RequiredKeys)
{
    EXPECT_THROW(ExperimentConfig::parse("[experiment]\nname = x\n[train]\nepochs = 1\n"), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse("[experiment]\nseed = 1\n[train]\nepochs = 1\n"), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse("[experiment]\nname = x\nseed = 1\n"), ValidationError);
}

TEST(Config, UnknownKeysAndSections)
{
    EXPECT_THROW(ExperimentConfig::parse(std::string(kMinimal) + "[model]\nembed_size = 3\n"), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(std::string(kMinimal) + "[optimizer]\nlr = 3\n"), ValidationError);
}

TEST(Config, BadValues)
{
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"train.epochs=-1"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"train.learning_rate=fast"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"train.balanced_sampling=maybe"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"model.num_heads=5"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"lora.rank=40"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"experiment.name=a/b"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"experiment.protocol=cross"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"data.train_tools=gan_like"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse("[experiment\nname = x\n"), ValidationError);
}

TEST(Config, Overrides)
{
    const auto c = ExperimentConfig::parse(kMinimal, {"train.epochs=7", "lora.rank=8", "experiment.mode=single_image",
                                                      "data.test_tools=landmark_like,diffusion_like"});
    EXPECT_EQ(c.train.epochs, 7u);
    EXPECT_EQ(c.lora.rank, 8u);
    EXPECT_EQ(c.mode, DetectorMode::SingleImage);
    EXPECT_EQ(c.data.test_tools.size(), 2u);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"epochs=7"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"train.epochs"}), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"train.warmup=3"}), ValidationError);
}

TEST(Config, CanonicalAndHash)
{
    const auto a = ExperimentConfig::parse(kMinimal);
    const auto b = ExperimentConfig::parse(std::string(kMinimal) + "\n; comment\n");
    const auto c = ExperimentConfig::parse(kMinimal, {"lora.alpha=16"});
    EXPECT_EQ(a.canonical(), b.canonical());
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_NE(a.canonical().find("lora.alpha=8\n"), std::string::npos);
    EXPECT_NE(c.canonical().find("lora.alpha=16\n"), std::string::npos);
    std::vector<std::string> lines;
    std::istringstream in(a.canonical());
    for (std::string line; std::getline(in, line);) {
        lines.push_back(line);
    }
    EXPECT_TRUE(std::is_sorted(lines.begin(), lines.end()));
}

TEST(Config, ShippedConfigsParse)
{
    for (const char* name : {"toy.ini", "smoke.ini"}) {
        const fs::path path = fs::path(DFMAD_SOURCE_DIR) / "configs" / name;
        EXPECT_NO_THROW(ExperimentConfig::load(path)) << name;
    }
    EXPECT_THROW(ExperimentConfig::load("/nonexistent/config.ini"), IoError);
}

TEST(Config, ToyConfigMatchesReferenceSettings)
{
    const auto c = ExperimentConfig::load(fs::path(DFMAD_SOURCE_DIR) / "configs" / "toy.ini");
    EXPECT_EQ(c.train.epochs, 30u);
    EXPECT_EQ(c.train.learning_rate, 1e-4);
    EXPECT_EQ(c.train.weight_decay, 0.01);
    EXPECT_GE(c.data.synth.num_identities, 40u);
    EXPECT_EQ(c.data.train_tools, std::vector<ArtefactModel>{ArtefactModel::LandmarkLike});
    EXPECT_EQ(c.vit.image_size, 32u);
    EXPECT_EQ(c.vit.embed_dim, 64u);
    EXPECT_EQ(c.vit.num_layers, 4u);
}

TEST(ProtocolKind, Names)
{
    for (ProtocolKind k :
         {ProtocolKind::KnownAttackCross, ProtocolKind::UnknownAttackLoo, ProtocolKind::AblationSmad}) {
        EXPECT_EQ(parse_protocol_kind(to_string(k)), k);
    }
    EXPECT_EQ(to_string(ProtocolKind::AblationSmad), "ablation_smad");
    EXPECT_THROW(parse_protocol_kind("loo"), ValidationError);
}

TEST(Grid, DefaultExpandsToEighteenCells)
{
    const GridAxes axes;
    const auto cells = axes.expand(LoRAConfig{});
    ASSERT_EQ(cells.size(), 18u);
    std::set<std::tuple<std::size_t, double, double>> unique;
    for (const auto& c : cells) {
        unique.insert({c.rank, c.alpha, c.dropout});
        EXPECT_EQ(c.scaling, LoraScaling::RankStabilised);
    }
    EXPECT_EQ(unique.size(), 18u);
    EXPECT_EQ(cells.front().rank, 2u);
    EXPECT_EQ(cells.back().rank, 8u);
}

TEST(Grid, DomainChecked)
{
    GridAxes axes;
    axes.ranks = {16};
    EXPECT_THROW(axes.validate(), ValidationError);
    axes.unrestricted = true;
    EXPECT_NO_THROW(axes.validate());
    GridAxes empty;
    empty.alphas.clear();
    EXPECT_THROW(empty.validate(), ValidationError);
    EXPECT_THROW(ExperimentConfig::parse(kMinimal, {"grid.dropouts=0.5"}), ValidationError);
    EXPECT_NO_THROW(ExperimentConfig::parse(kMinimal, {"grid.dropouts=0.5", "grid.unrestricted=true"}));
}

TEST(CrossSynth, DiffersInAcquisitionOnly)
{
    const auto c = ExperimentConfig::parse(kMinimal);
    const SynthConfig b = c.data.cross_synth();
    EXPECT_NE(b.seed, c.data.synth.seed);
    EXPECT_EQ(b.brightness_offset, c.data.cross_brightness_offset);
    EXPECT_EQ(b.noise_std, c.data.cross_noise_std);
    EXPECT_EQ(b.image_size, c.data.synth.image_size);
    EXPECT_EQ(b.num_identities, c.data.synth.num_identities);
}

TEST_F(HarnessDir, MetricsCommand)
{
    fs::create_directories(root_);
    const std::vector<ScoreRecord> records = {
        {"a", Label::BonaFide, 0.1, kBonaFideTag}, {"b", Label::BonaFide, 0.3, kBonaFideTag},
        {"c", Label::Morph, 0.7, "tool"},          {"d", Label::Morph, 0.2, "tool"},
    };
    write_scores(root_ / "scores.csv", records);
    const auto report = cmd_metrics(root_ / "scores.csv", root_ / "out", 0);
    EXPECT_EQ(report.num_morph, 2u);
    for (const char* f : {"report.txt", "det.csv", "det.svg"}) {
        EXPECT_TRUE(fs::exists(root_ / "out" / f)) << f;
    }
}

TEST_F(HarnessDir, TrainEvalAndGenData)
{
    const auto config = ExperimentConfig::parse(tiny_ini(root_));
    const RunSummary run = cmd_train(config);
    for (const char* f : {"scores.csv", "report.txt", "det.csv", "det.svg", "train_log.csv", "run.json"}) {
        EXPECT_TRUE(fs::exists(run.dir / f)) << f;
    }
    std::ifstream log(run.dir / "train_log.csv");
    std::string header;
    std::string first;
    std::getline(log, header);
    std::getline(log, first);
    EXPECT_EQ(header, "epoch,mean_loss");
    EXPECT_EQ(first.substr(0, 2), "1,");

    const RunSummary again = cmd_eval(config, run.dir / "model");
    EXPECT_EQ(format_report(again.report), format_report(run.report));

    const auto split = cmd_gen_data(config, root_ / "data");
    EXPECT_TRUE(fs::exists(root_ / "data" / "manifest.csv"));
    const std::string manifest = "data.manifest=" + (root_ / "data" / "manifest.csv").string();
    auto from_disk = ExperimentConfig::parse(tiny_ini(root_), {manifest});
    const RunSummary disk_eval = cmd_eval(from_disk, run.dir / "model");
    EXPECT_EQ(disk_eval.report.num_morph + disk_eval.report.num_bona_fide, split.test.size());
    EXPECT_EQ(format_report(disk_eval.report), format_report(run.report));

    auto wrong = ExperimentConfig::parse(tiny_ini(root_), {"data.image_size=32"});
    EXPECT_THROW(cmd_eval(wrong, run.dir / "model"), CompatibilityError);
}

TEST_F(HarnessDir, CrossDatabaseWithManifestNeedsSecondDatabase)
{
    auto config = ExperimentConfig::parse(tiny_ini(root_), {"experiment.protocol=known_attack_cross"});
    cmd_gen_data(config, root_ / "data");
    config.data.manifest = root_ / "data" / "manifest.csv";
    EXPECT_THROW(cmd_protocol(config), ValidationError);
}

TEST(Provenance, NonEmpty)
{
    EXPECT_FALSE(provenance().empty());
}
