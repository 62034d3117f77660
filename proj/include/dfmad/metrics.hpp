#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dfmad/sample.hpp"

namespace dfmad {

// Detector output for one pair. Higher scores are more morph-like; a record
// is classified as morph when score >= threshold.
struct ScoreRecord {
    std::string pair_id;
    Label label = Label::BonaFide;
    double score = 0.0;
    std::string tool_tag;
};

// Percentage of morphs classified as bona fide (score < threshold).
double macer(std::span<const ScoreRecord> records, double threshold);
// Percentage of bona fides classified as morph (score >= threshold).
double bscer(std::span<const ScoreRecord> records, double threshold);

struct OperatingPoint {
    double rate = 0.0; // D-EER or BSCER, in percent
    double threshold = 0.0;
    double macer = 0.0;
    double bscer = 0.0;
    bool achieved = true; // false when a MACER target could not be met
};

// Candidate thresholds: every distinct observed score, ascending, followed by
// one sentinel just above the maximum (everything classified bona fide).
std::vector<double> candidate_thresholds(std::span<const ScoreRecord> records);

// Threshold minimising |MACER - BSCER| over the candidates (lowest threshold
// on ties); rate = (MACER + BSCER) / 2 at that point.
OperatingPoint d_eer(std::span<const ScoreRecord> records);

// Linear interpolation of the EER between the two candidates that bracket
// the MACER/BSCER crossing.
double interpolated_eer(std::span<const ScoreRecord> records);

// BSCER at the highest candidate threshold whose MACER <= target_percent.
OperatingPoint bscer_at_macer(std::span<const ScoreRecord> records, double target_percent);

struct DetPoint {
    double macer = 0.0;
    double bscer = 0.0;
    double threshold = 0.0;
};

// (MACER, BSCER) at every candidate threshold, ascending threshold, so MACER
// is non-decreasing and BSCER non-increasing along the curve. Consecutive
// duplicate rate pairs are dropped. A positive `resolution` subsamples the
// curve to at most that many points, keeping both endpoints.
std::vector<DetPoint> det_curve(std::span<const ScoreRecord> records, std::size_t resolution = 0);

inline constexpr std::array<double, 3> kMacerTargets{10.0, 5.0, 1.0};

struct BscerAtMacer {
    double macer_target = 0.0;
    OperatingPoint point;
};

struct MetricsReport {
    std::size_t num_bona_fide = 0;
    std::size_t num_morph = 0;
    OperatingPoint d_eer;
    std::vector<BscerAtMacer> bscer_at;
    std::vector<DetPoint> det;
    bool flat_scores = false; // every score identical; the operating points are degenerate
};

MetricsReport compute_report(std::span<const ScoreRecord> records);

// Score CSV: header `pair_id,label,score,tool_tag`, label in {bonafide, morph}.
void write_scores(const std::filesystem::path& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_scores(const std::filesystem::path& path);

// Key-value report (num_bonafide, num_morph, d_eer, d_eer_threshold,
// bscer_at_macer_<t>, bscer_at_macer_<t>_threshold for t in 10, 5, 1).
std::string format_report(const MetricsReport& report);
void write_report(const std::filesystem::path& path, const MetricsReport& report);
// DET CSV: header `macer,bscer,threshold`.
void write_det_csv(const std::filesystem::path& path, std::span<const DetPoint> det);

struct DetSeries {
    std::string label;
    std::vector<DetPoint> points;
};

// DET plot with log-scaled axes (rates clipped to [0.01, 100] percent).
void write_det_svg(const std::filesystem::path& path, std::span<const DetSeries> series, const std::string& title);

} // namespace dfmad
