#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

#include <unistd.h>

#include "dfmad/error.hpp"
#include "dfmad/metrics.hpp"
#include "oracles.hpp"

using namespace dfmad;

namespace {

std::vector<ScoreRecord> make(std::initializer_list<double> bona_fide, std::initializer_list<double> morph)
{
    std::vector<ScoreRecord> out;
    int i = 0;
    for (double s : bona_fide) {
        out.push_back({"b" + std::to_string(i++), Label::BonaFide, s, kBonaFideTag});
    }
    for (double s : morph) {
        out.push_back({"m" + std::to_string(i++), Label::Morph, s, "tool"});
    }
    return out;
}

std::vector<oracle::RatePair> rates(const std::vector<DetPoint>& det)
{
    std::vector<oracle::RatePair> out;
    for (const auto& p : det) {
        out.push_back({p.macer, p.bscer});
    }
    return out;
}

std::filesystem::path temp_file(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("dfmad_metrics_" + std::to_string(::getpid()) + "_" + name);
}

} // namespace

TEST(Macer, Examples)
{
    EXPECT_EQ(macer(make({0.1}, {1.0, 1.0, 1.0}), 0.5), 0.0);
    EXPECT_EQ(macer(make({0.1}, {0.2, 0.8}), 0.5), 50.0);
    EXPECT_EQ(macer(make({0.1}, {0.5}), 0.5), 0.0); // score >= threshold is a morph decision
}

TEST(Bscer, Examples)
{
    EXPECT_EQ(bscer(make({0.0, 0.0}, {1.0}), 0.5), 0.0);
    EXPECT_EQ(bscer(make({0.0, 0.3, 0.9}, {1.0}), 0.0), 100.0);
    EXPECT_NEAR(bscer(make({0.0, 0.3, 0.9}, {1.0}), 0.3), 200.0 / 3.0, 1e-12);
}

TEST(Rates, MissingClassIsProtocolError)
{
    EXPECT_THROW(macer(make({0.1}, {}), 0.5), ProtocolError);
    EXPECT_THROW(bscer(make({}, {0.1}), 0.5), ProtocolError);
    EXPECT_THROW(d_eer(make({0.1}, {})), ProtocolError);
    EXPECT_THROW(det_curve(make({}, {0.2})), ProtocolError);
}

TEST(Rates, NonFiniteScoreRejected)
{
    EXPECT_THROW(d_eer(make({std::nan("")}, {0.4})), ValidationError);
}

TEST(DEer, PerfectSeparation)
{
    const auto r = make({0.1, 0.2, 0.3}, {0.7, 0.8});
    const auto p = d_eer(r);
    EXPECT_EQ(p.rate, 0.0);
    EXPECT_GT(p.threshold, 0.3);
    EXPECT_LE(p.threshold, 0.7);
    for (double target : kMacerTargets) {
        EXPECT_EQ(bscer_at_macer(r, target).rate, 0.0);
    }
}

TEST(DEer, RandomLabelsNearFifty)
{
    std::mt19937_64 rng(11);
    const auto r = oracle::random_records(rng, 1000, 1000);
    EXPECT_NEAR(d_eer(r).rate, 50.0, 5.0);
}

TEST(DEer, TiesGoToLowerThreshold)
{
    // Thresholds 0.5 and 0.9 both leave |MACER - BSCER| = 50.
    const auto r = make({0.5}, {0.1, 0.9});
    const auto p = d_eer(r);
    EXPECT_EQ(p.threshold, 0.5);
    EXPECT_EQ(p.rate, 75.0);
}

TEST(DEer, RatesAtThresholdWithinOneStep)
{
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t nb = 5 + trial * 3;
        const std::size_t nm = 3 + trial * 2;
        const auto r = oracle::random_records(rng, nb, nm); // continuous: one sample crosses per step
        const auto p = d_eer(r);
        EXPECT_LE(std::abs(p.macer - p.bscer), 100.0 / static_cast<double>(std::min(nb, nm)) + 1e-12);
    }
}

TEST(InterpolatedEer, SeparatedAndSymmetric)
{
    EXPECT_NEAR(interpolated_eer(make({0.1, 0.2}, {0.8, 0.9})), 0.0, 1e-12);
    std::mt19937_64 rng(13);
    const auto r = oracle::random_records(rng, 400, 400);
    EXPECT_NEAR(interpolated_eer(r), d_eer(r).rate, 1.0);
}

TEST(BscerAtMacer, MonotoneInTarget)
{
    std::mt19937_64 rng(14);
    for (int trial = 0; trial < 50; ++trial) {
        const auto r = oracle::random_records(rng, 80, 60, trial % 3 == 0 ? 5 : 0);
        const double b10 = bscer_at_macer(r, 10.0).rate;
        const double b5 = bscer_at_macer(r, 5.0).rate;
        const double b1 = bscer_at_macer(r, 1.0).rate;
        EXPECT_LE(b10, b5);
        EXPECT_LE(b5, b1);
    }
}

TEST(BscerAtMacer, HighestQualifyingThreshold)
{
    // MACER(0.3) = 0, MACER(0.6) = 25, MACER(0.7) = 50.
    const auto r = make({0.1, 0.2, 0.65}, {0.3, 0.6, 0.7, 0.9});
    const auto p = bscer_at_macer(r, 30.0);
    EXPECT_EQ(p.threshold, 0.6);
    EXPECT_EQ(p.macer, 25.0);
    EXPECT_NEAR(p.rate, 100.0 / 3.0, 1e-12);
    EXPECT_TRUE(p.achieved);
}

TEST(DetCurve, TwoSamples)
{
    const auto det = det_curve(make({0.2}, {0.8}));
    ASSERT_FALSE(det.empty());
    EXPECT_EQ(det.front().macer, 0.0);
    EXPECT_EQ(det.front().bscer, 100.0);
    EXPECT_EQ(det.back().macer, 100.0);
    EXPECT_EQ(det.back().bscer, 0.0);
}

TEST(DetCurve, MonotoneAndBounded)
{
    std::mt19937_64 rng(15);
    for (int trial = 0; trial < 30; ++trial) {
        const auto det = det_curve(oracle::random_records(rng, 40, 30, trial % 2 == 0 ? 0 : 7));
        for (std::size_t i = 0; i < det.size(); ++i) {
            EXPECT_GE(det[i].macer, 0.0);
            EXPECT_LE(det[i].macer, 100.0);
            EXPECT_GE(det[i].bscer, 0.0);
            EXPECT_LE(det[i].bscer, 100.0);
            if (i > 0) {
                EXPECT_GE(det[i].macer, det[i - 1].macer);
                EXPECT_LE(det[i].bscer, det[i - 1].bscer);
                EXPECT_GT(det[i].threshold, det[i - 1].threshold);
            }
        }
    }
}

TEST(DetCurve, ContainsDeerPoint)
{
    std::mt19937_64 rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const auto r = oracle::random_records(rng, 50, 40, trial % 2 == 0 ? 0 : 6);
        const auto p = d_eer(r);
        bool found = false;
        for (const auto& q : det_curve(r)) {
            found = found || (q.macer == p.macer && q.bscer == p.bscer);
        }
        EXPECT_TRUE(found);
    }
}

TEST(DetCurve, ResolutionKeepsEndpoints)
{
    std::mt19937_64 rng(17);
    const auto r = oracle::random_records(rng, 300, 300);
    const auto full = det_curve(r);
    const auto coarse = det_curve(r, 25);
    ASSERT_LE(coarse.size(), 25u);
    ASSERT_GE(coarse.size(), 2u);
    EXPECT_EQ(coarse.front().threshold, full.front().threshold);
    EXPECT_EQ(coarse.back().threshold, full.back().threshold);
}

TEST(Oracle, RandomSetsMatchExhaustiveSweep)
{
    std::mt19937_64 rng(18);
    std::uniform_int_distribution<std::size_t> size(1, 300);
    for (int trial = 0; trial < 60; ++trial) {
        const auto r = oracle::random_records(rng, size(rng), size(rng), trial % 3 == 0 ? 8 : 0);
        const auto lib = d_eer(r);
        const auto ref = oracle::d_eer(r);
        EXPECT_EQ(lib.rate, ref.rate) << trial;
        EXPECT_TRUE(oracle::same_threshold(lib.threshold, ref.threshold, r)) << trial;
        for (double target : kMacerTargets) {
            const auto lb = bscer_at_macer(r, target);
            const auto rb = oracle::bscer_at_macer(r, target);
            EXPECT_EQ(lb.rate, rb.rate) << trial << " @" << target;
            EXPECT_TRUE(oracle::same_threshold(lb.threshold, rb.threshold, r));
        }
        EXPECT_EQ(rates(det_curve(r)), oracle::det(r)) << trial;
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            EXPECT_EQ(macer(r, t), oracle::macer(r, t));
            EXPECT_EQ(bscer(r, t), oracle::bscer(r, t));
        }
    }
}

TEST(Oracle, DegenerateSets)
{
    const std::vector<std::vector<ScoreRecord>> sets = {
        make({0.5, 0.5, 0.5}, {0.5, 0.5}), make({0.3}, {0.7}), make({0.7}, {0.3}), make({0.4}, {0.4}),
        make({0.0}, {1.0, 1.0}),           make({1.0, 1.0}, {0.0}),
    };
    for (const auto& r : sets) {
        const auto lib = d_eer(r);
        const auto ref = oracle::d_eer(r);
        EXPECT_EQ(lib.rate, ref.rate);
        EXPECT_TRUE(oracle::same_threshold(lib.threshold, ref.threshold, r));
        EXPECT_EQ(bscer_at_macer(r, 10.0).rate, oracle::bscer_at_macer(r, 10.0).rate);
        EXPECT_EQ(rates(det_curve(r)), oracle::det(r));
    }
}

TEST(Report, FlatScoresFlagged)
{
    const auto flat = compute_report(make({0.5, 0.5}, {0.5}));
    EXPECT_TRUE(flat.flat_scores);
    EXPECT_EQ(flat.d_eer.rate, 50.0);
    EXPECT_FALSE(compute_report(make({0.4}, {0.5})).flat_scores);
}

TEST(Report, CountsAndTargets)
{
    const auto rep = compute_report(make({0.1, 0.2, 0.3}, {0.6, 0.9}));
    EXPECT_EQ(rep.num_bona_fide, 3u);
    EXPECT_EQ(rep.num_morph, 2u);
    ASSERT_EQ(rep.bscer_at.size(), 3u);
    EXPECT_EQ(rep.bscer_at[0].macer_target, 10.0);
    EXPECT_EQ(rep.bscer_at[1].macer_target, 5.0);
    EXPECT_EQ(rep.bscer_at[2].macer_target, 1.0);
}

TEST(Report, PureFunction)
{
    std::mt19937_64 rng(19);
    const auto r = oracle::random_records(rng, 120, 80);
    EXPECT_EQ(format_report(compute_report(r)), format_report(compute_report(r)));
}

TEST(Report, KeyValueFormat)
{
    const std::string text = format_report(compute_report(make({0.1, 0.2}, {0.8})));
    EXPECT_NE(text.find("num_bonafide=2\n"), std::string::npos);
    EXPECT_NE(text.find("num_morph=1\n"), std::string::npos);
    EXPECT_NE(text.find("d_eer=0.000000\n"), std::string::npos);
    EXPECT_NE(text.find("bscer_at_macer_10="), std::string::npos);
    EXPECT_NE(text.find("bscer_at_macer_1_threshold="), std::string::npos);
}

TEST(RankInvariance, StrictlyIncreasingTransforms)
{
    std::mt19937_64 rng(20);
    const std::vector<std::function<double(double)>> transforms = {
        [](double s) { return 0.3 * s + 0.1; },
        [](double s) { return s * s * s; },
        [](double s) { return 1.0 / (1.0 + std::exp(-8.0 * (s - 0.5))); },
    };
    for (int trial = 0; trial < 20; ++trial) {
        const auto r = oracle::random_records(rng, 60, 45, trial % 2 == 0 ? 0 : 9);
        const auto base = compute_report(r);
        for (const auto& f : transforms) {
            auto moved = r;
            for (auto& x : moved) {
                x.score = f(x.score);
            }
            const auto rep = compute_report(moved);
            EXPECT_EQ(rep.d_eer.rate, base.d_eer.rate);
            for (std::size_t i = 0; i < rep.bscer_at.size(); ++i) {
                EXPECT_EQ(rep.bscer_at[i].point.rate, base.bscer_at[i].point.rate);
            }
            EXPECT_EQ(rates(rep.det), rates(base.det));
        }
    }
}

TEST(ScoreFile, RoundTrip)
{
    const auto path = temp_file("scores.csv");
    std::mt19937_64 rng(21);
    const auto r = oracle::random_records(rng, 20, 15);
    write_scores(path, r);
    const auto back = read_scores(path);
    ASSERT_EQ(back.size(), r.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        EXPECT_EQ(back[i].pair_id, r[i].pair_id);
        EXPECT_EQ(back[i].label, r[i].label);
        EXPECT_EQ(back[i].score, r[i].score);
        EXPECT_EQ(back[i].tool_tag, r[i].tool_tag);
    }
    std::filesystem::remove(path);
}

TEST(ScoreFile, Malformed)
{
    const auto path = temp_file("bad.csv");
    auto write = [&](const std::string& text) { std::ofstream(path) << text; };
    write("id,label,score\n");
    EXPECT_THROW(read_scores(path), ValidationError);
    write("pair_id,label,score,tool_tag\na,morph,0.5\n");
    EXPECT_THROW(read_scores(path), ValidationError);
    write("pair_id,label,score,tool_tag\na,morph,abc,t\n");
    EXPECT_THROW(read_scores(path), ValidationError);
    write("pair_id,label,score,tool_tag\na,morph,1.5,t\n");
    EXPECT_THROW(read_scores(path), ValidationError);
    write("pair_id,label,score,tool_tag\na,maybe,0.5,t\n");
    EXPECT_ANY_THROW(read_scores(path));
    std::filesystem::remove(path);
    EXPECT_THROW(read_scores(path), IoError);
}

TEST(DetFiles, CsvAndSvg)
{
    const auto csv = temp_file("det.csv");
    const auto svg = temp_file("det.svg");
    const auto det = det_curve(make({0.1, 0.4}, {0.3, 0.9}));
    write_det_csv(csv, det);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "macer,bscer,threshold");
    std::size_t rows = 0;
    for (std::string line; std::getline(in, line);) {
        ++rows;
    }
    EXPECT_EQ(rows, det.size());
    const DetSeries series[] = {{"differential", det}};
    write_det_svg(svg, series, "test");
    std::ifstream s(svg);
    const std::string content((std::istreambuf_iterator<char>(s)), std::istreambuf_iterator<char>());
    EXPECT_NE(content.find("<svg"), std::string::npos);
    EXPECT_NE(content.find("differential"), std::string::npos);
    std::filesystem::remove(csv);
    std::filesystem::remove(svg);
}
