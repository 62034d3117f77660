#include "dfmad/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "dfmad/archive.hpp"
#include "dfmad/error.hpp"

namespace dfmad {

namespace {

double percent(std::size_t count, std::size_t total)
{
    return 100.0 * static_cast<double>(count) / static_cast<double>(total);
}

// Sorted per-class scores; rates at a threshold come from binary search.
class Sweep {
public:
    explicit Sweep(std::span<const ScoreRecord> records)
    {
        for (const auto& r : records) {
            if (!std::isfinite(r.score)) {
                throw ValidationError("score for pair '" + r.pair_id + "' is not finite");
            }
            (r.label == Label::Morph ? morph_ : bona_fide_).push_back(r.score);
        }
        std::sort(morph_.begin(), morph_.end());
        std::sort(bona_fide_.begin(), bona_fide_.end());
    }

    void require_both() const
    {
        require_morph();
        require_bona_fide();
    }
    void require_morph() const
    {
        if (morph_.empty()) {
            throw ProtocolError("no morph records to evaluate");
        }
    }
    void require_bona_fide() const
    {
        if (bona_fide_.empty()) {
            throw ProtocolError("no bona fide records to evaluate");
        }
    }

    double macer(double threshold) const
    {
        const auto below = std::lower_bound(morph_.begin(), morph_.end(), threshold) - morph_.begin();
        return percent(static_cast<std::size_t>(below), morph_.size());
    }

    double bscer(double threshold) const
    {
        const auto below = std::lower_bound(bona_fide_.begin(), bona_fide_.end(), threshold) - bona_fide_.begin();
        return percent(bona_fide_.size() - static_cast<std::size_t>(below), bona_fide_.size());
    }

    std::size_t num_morph() const { return morph_.size(); }
    std::size_t num_bona_fide() const { return bona_fide_.size(); }

private:
    std::vector<double> morph_;
    std::vector<double> bona_fide_;
};

} // namespace

double macer(std::span<const ScoreRecord> records, double threshold)
{
    const Sweep sweep(records);
    sweep.require_morph();
    return sweep.macer(threshold);
}

double bscer(std::span<const ScoreRecord> records, double threshold)
{
    const Sweep sweep(records);
    sweep.require_bona_fide();
    return sweep.bscer(threshold);
}

std::vector<double> candidate_thresholds(std::span<const ScoreRecord> records)
{
    std::vector<double> t;
    t.reserve(records.size() + 1);
    for (const auto& r : records) {
        t.push_back(r.score);
    }
    std::sort(t.begin(), t.end());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    if (!t.empty()) {
        t.push_back(std::nextafter(t.back(), std::numeric_limits<double>::infinity()));
    }
    return t;
}

OperatingPoint d_eer(std::span<const ScoreRecord> records)
{
    const Sweep sweep(records);
    sweep.require_both();
    OperatingPoint best;
    double best_gap = std::numeric_limits<double>::infinity();
    for (double t : candidate_thresholds(records)) {
        const double m = sweep.macer(t);
        const double b = sweep.bscer(t);
        const double gap = std::abs(m - b);
        if (gap < best_gap) {
            best_gap = gap;
            best = {(m + b) / 2.0, t, m, b, true};
        }
    }
    return best;
}

double interpolated_eer(std::span<const ScoreRecord> records)
{
    const Sweep sweep(records);
    sweep.require_both();
    const auto thresholds = candidate_thresholds(records);
    double prev_m = sweep.macer(thresholds.front());
    double prev_b = sweep.bscer(thresholds.front());
    for (std::size_t i = 1; i < thresholds.size(); ++i) {
        const double m = sweep.macer(thresholds[i]);
        const double b = sweep.bscer(thresholds[i]);
        if (m - b >= 0.0) {
            const double d0 = prev_m - prev_b;
            const double d1 = m - b;
            const double w = d1 == d0 ? 0.0 : -d0 / (d1 - d0);
            return ((prev_m + w * (m - prev_m)) + (prev_b + w * (b - prev_b))) / 2.0;
        }
        prev_m = m;
        prev_b = b;
    }
    return (prev_m + prev_b) / 2.0;
}

OperatingPoint bscer_at_macer(std::span<const ScoreRecord> records, double target_percent)
{
    const Sweep sweep(records);
    sweep.require_both();
    const auto thresholds = candidate_thresholds(records);
    // MACER is non-decreasing in the threshold, so scan from the top.
    for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
        const double m = sweep.macer(*it);
        if (m <= target_percent) {
            const double b = sweep.bscer(*it);
            return {b, *it, m, b, true};
        }
    }
    // Unreachable for non-negative targets: the lowest candidate has MACER 0.
    const double t = thresholds.front();
    return {sweep.bscer(t), t, sweep.macer(t), sweep.bscer(t), false};
}

std::vector<DetPoint> det_curve(std::span<const ScoreRecord> records, std::size_t resolution)
{
    const Sweep sweep(records);
    sweep.require_both();
    std::vector<DetPoint> curve;
    for (double t : candidate_thresholds(records)) {
        const DetPoint p{sweep.macer(t), sweep.bscer(t), t};
        if (!curve.empty() && curve.back().macer == p.macer && curve.back().bscer == p.bscer) {
            continue;
        }
        curve.push_back(p);
    }
    if (resolution >= 2 && curve.size() > resolution) {
        std::vector<DetPoint> sampled;
        sampled.reserve(resolution);
        const double step = static_cast<double>(curve.size() - 1) / static_cast<double>(resolution - 1);
        for (std::size_t i = 0; i < resolution; ++i) {
            sampled.push_back(curve[static_cast<std::size_t>(std::llround(step * static_cast<double>(i)))]);
        }
        return sampled;
    }
    return curve;
}

MetricsReport compute_report(std::span<const ScoreRecord> records)
{
    const Sweep sweep(records);
    sweep.require_both();
    MetricsReport report;
    report.num_bona_fide = sweep.num_bona_fide();
    report.num_morph = sweep.num_morph();
    report.d_eer = d_eer(records);
    for (double target : kMacerTargets) {
        report.bscer_at.push_back({target, bscer_at_macer(records, target)});
    }
    report.det = det_curve(records);
    report.flat_scores = std::all_of(records.begin(), records.end(),
                                     [&](const ScoreRecord& r) { return r.score == records.front().score; });
    return report;
}

void write_scores(const std::filesystem::path& path, std::span<const ScoreRecord> records)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write score file " + path.string());
    }
    out << "pair_id,label,score,tool_tag\n";
    for (const auto& r : records) {
        out << r.pair_id << ',' << to_string(r.label) << ',' << format_double(r.score) << ',' << r.tool_tag << '\n';
    }
}

std::vector<ScoreRecord> read_scores(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open score file " + path.string());
    }
    std::string line;
    if (!std::getline(in, line) || line != "pair_id,label,score,tool_tag") {
        throw ValidationError(path.string() + ": expected header 'pair_id,label,score,tool_tag'");
    }
    std::vector<ScoreRecord> records;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string field;
        while (std::getline(ss, field, ',')) {
            fields.push_back(field);
        }
        if (line.back() == ',') {
            fields.emplace_back(); // getline drops an empty last field
        }
        if (fields.size() != 4) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
        }
        ScoreRecord r;
        r.pair_id = fields[0];
        r.label = parse_label(fields[1]);
        try {
            std::size_t used = 0;
            r.score = std::stod(fields[2], &used);
            if (used != fields[2].size()) {
                throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": bad score '" + fields[2] + "'");
        }
        if (!std::isfinite(r.score) || r.score < 0.0 || r.score > 1.0) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": score " + fields[2] +
                                  " outside [0, 1]");
        }
        r.tool_tag = fields[3];
        records.push_back(std::move(r));
    }
    return records;
}

std::string format_report(const MetricsReport& report)
{
    auto rate = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.6f", v);
        return std::string(buf);
    };
    std::ostringstream out;
    out << "num_bonafide=" << report.num_bona_fide << '\n';
    out << "num_morph=" << report.num_morph << '\n';
    out << "d_eer=" << rate(report.d_eer.rate) << '\n';
    out << "d_eer_threshold=" << format_double(report.d_eer.threshold) << '\n';
    for (const auto& b : report.bscer_at) {
        const std::string key = "bscer_at_macer_" + std::to_string(static_cast<int>(b.macer_target));
        out << key << '=' << rate(b.point.rate) << '\n';
        out << key << "_threshold=" << format_double(b.point.threshold) << '\n';
    }
    return out.str();
}

void write_report(const std::filesystem::path& path, const MetricsReport& report)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write report " + path.string());
    }
    out << format_report(report);
}

void write_det_csv(const std::filesystem::path& path, std::span<const DetPoint> det)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write DET file " + path.string());
    }
    out << "macer,bscer,threshold\n";
    for (const auto& p : det) {
        out << format_double(p.macer) << ',' << format_double(p.bscer) << ',' << format_double(p.threshold) << '\n';
    }
}

void write_det_svg(const std::filesystem::path& path, std::span<const DetSeries> series, const std::string& title)
{
    constexpr double kSize = 420.0;
    constexpr double kMargin = 60.0;
    constexpr double kLo = -2.0; // log10(0.01 %)
    constexpr double kHi = 2.0;  // log10(100 %)
    constexpr const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"};
    auto axis = [](double rate) {
        const double l = std::log10(std::clamp(rate, 0.01, 100.0));
        return (l - kLo) / (kHi - kLo) * kSize;
    };

    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write DET plot " + path.string());
    }
    const double total = kSize + 2 * kMargin;
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << total << "\" height=\"" << total << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << total / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" << title
        << "</text>\n";
    for (double tick : {0.01, 0.1, 1.0, 10.0, 100.0}) {
        const double x = kMargin + axis(tick);
        const double y = kMargin + kSize - axis(tick);
        out << "<line x1=\"" << x << "\" y1=\"" << kMargin << "\" x2=\"" << x << "\" y2=\"" << kMargin + kSize
            << "\" stroke=\"#ddd\"/>\n";
        out << "<line x1=\"" << kMargin << "\" y1=\"" << y << "\" x2=\"" << kMargin + kSize << "\" y2=\"" << y
            << "\" stroke=\"#ddd\"/>\n";
        out << "<text x=\"" << x << "\" y=\"" << kMargin + kSize + 16 << "\" text-anchor=\"middle\" font-size=\"10\">"
            << tick << "</text>\n";
        out << "<text x=\"" << kMargin - 6 << "\" y=\"" << y + 3 << "\" text-anchor=\"end\" font-size=\"10\">" << tick
            << "</text>\n";
    }
    out << "<rect x=\"" << kMargin << "\" y=\"" << kMargin << "\" width=\"" << kSize << "\" height=\"" << kSize
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    out << "<text x=\"" << total / 2 << "\" y=\"" << total - 16 << "\" text-anchor=\"middle\" font-size=\"12\">"
        << "MACER (%)</text>\n";
    out << "<text x=\"16\" y=\"" << total / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 16 "
        << total / 2 << ")\">BSCER (%)</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kColors[s % std::size(kColors)];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (const auto& p : series[s].points) {
            out << kMargin + axis(p.macer) << ',' << kMargin + kSize - axis(p.bscer) << ' ';
        }
        out << "\"/>\n";
        out << "<text x=\"" << kMargin + kSize - 8 << "\" y=\"" << kMargin + 18 + 16 * static_cast<double>(s)
            << "\" text-anchor=\"end\" font-size=\"11\" fill=\"" << color << "\">" << series[s].label << "</text>\n";
    }
    out << "</svg>\n";
}

} // namespace dfmad
