#include "dfmad/harness.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "dfmad/archive.hpp"
#include "dfmad/error.hpp"

namespace dfmad {

namespace fs = std::filesystem;
namespace pt = boost::property_tree;

namespace {

// ---------------------------------------------------------------- parsing

const std::map<std::string, std::set<std::string>>& allowed_keys()
{
    static const std::map<std::string, std::set<std::string>> keys = {
        {"experiment", {"name", "seed", "mode", "protocol", "output_root", "verbose"}},
        {"model", {"image_size", "patch_size", "channels", "embed_dim", "num_heads", "num_layers", "mlp_ratio",
                   "layer_norm_eps"}},
        {"lora", {"rank", "alpha", "dropout", "scaling", "target_query", "target_value"}},
        {"grid", {"ranks", "alphas", "dropouts", "unrestricted", "threads"}},
        {"train", {"epochs", "batch_size", "learning_rate", "weight_decay", "balanced_sampling", "augment_crop",
                   "augment_flip", "augment_photometric", "crop_fraction", "flip_probability", "photometric_range",
                   "focal_alpha", "focal_eta"}},
        {"data", {"manifest", "cross_manifest", "image_format", "seed", "num_identities", "captures_per_identity",
                  "morphs_per_identity", "beta", "artefact_strength", "ghost_shift", "texture_amplitude",
                  "noise_std", "pose_jitter", "contrast_jitter", "illumination_jitter", "brightness_offset",
                  "mirror_symmetric", "test_fraction", "image_size", "channels", "train_tools", "test_tools",
                  "loo_tools", "cross_seed", "cross_brightness_offset", "cross_noise_std"}},
        {"eval", {"det_resolution"}},
    };
    return keys;
}

std::string trim(const std::string& text)
{
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) {
        return "";
    }
    const auto last = text.find_last_not_of(" \t\r\n");
    return text.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text)
{
    std::vector<std::string> items;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) {
            items.push_back(item);
        }
    }
    return items;
}

class Reader {
public:
    explicit Reader(const pt::ptree& tree) : tree_(tree) {}

    std::optional<std::string> raw(const std::string& key) const
    {
        if (auto v = tree_.get_optional<std::string>(key)) {
            return trim(*v);
        }
        return std::nullopt;
    }

    std::string required(const std::string& key) const
    {
        auto v = raw(key);
        if (!v || v->empty()) {
            throw ValidationError("missing required config field '" + key + "'");
        }
        return *v;
    }

    std::string text(const std::string& key, const std::string& fallback) const { return raw(key).value_or(fallback); }

    double real(const std::string& key, double fallback) const
    {
        auto v = raw(key);
        return v ? to_real(key, *v) : fallback;
    }

    std::uint64_t uint(const std::string& key, std::uint64_t fallback) const
    {
        auto v = raw(key);
        return v ? to_uint(key, *v) : fallback;
    }

    bool flag(const std::string& key, bool fallback) const
    {
        auto v = raw(key);
        if (!v) {
            return fallback;
        }
        if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") {
            return true;
        }
        if (*v == "false" || *v == "0" || *v == "no" || *v == "off") {
            return false;
        }
        throw ValidationError("config field '" + key + "' must be a boolean, got '" + *v + "'");
    }

    static double to_real(const std::string& key, const std::string& v)
    {
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used == v.size() && std::isfinite(x)) {
                return x;
            }
        } catch (const std::exception&) {
        }
        throw ValidationError("config field '" + key + "' must be a number, got '" + v + "'");
    }

    static std::uint64_t to_uint(const std::string& key, const std::string& v)
    {
        try {
            std::size_t used = 0;
            if (!v.empty() && v[0] != '-') {
                const unsigned long long x = std::stoull(v, &used);
                if (used == v.size()) {
                    return x;
                }
            }
        } catch (const std::exception&) {
        }
        throw ValidationError("config field '" + key + "' must be a non-negative integer, got '" + v + "'");
    }

private:
    const pt::ptree& tree_;
};

std::vector<ArtefactModel> parse_tools(const std::string& text)
{
    std::vector<ArtefactModel> tools;
    for (const auto& item : split_list(text)) {
        tools.push_back(parse_artefact_model(item));
    }
    return tools;
}

std::string join_tools(const std::vector<ArtefactModel>& tools)
{
    std::string out;
    for (std::size_t i = 0; i < tools.size(); ++i) {
        out += (i ? "," : "") + to_string(tools[i]);
    }
    return out;
}

template <typename T>
std::string join_numbers(const std::vector<T>& values)
{
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if constexpr (std::is_floating_point_v<T>) {
            out += (i ? "," : "") + format_double(values[i]);
        } else {
            out += (i ? "," : "") + std::to_string(values[i]);
        }
    }
    return out;
}

void check_keys(const pt::ptree& tree)
{
    const auto& allowed = allowed_keys();
    for (const auto& [section, body] : tree) {
        auto it = allowed.find(section);
        if (it == allowed.end()) {
            throw ValidationError("unknown config section [" + section + "]");
        }
        for (const auto& [key, value] : body) {
            if (!it->second.contains(key)) {
                throw ValidationError("unknown config field '" + section + "." + key + "'");
            }
        }
    }
}

void apply_override(pt::ptree& tree, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ValidationError("override '" + assignment + "' is not of the form section.key=value");
    }
    const std::string key = trim(assignment.substr(0, eq));
    if (std::count(key.begin(), key.end(), '.') != 1 || key.front() == '.' || key.back() == '.') {
        throw ValidationError("override key '" + key + "' must be section.key");
    }
    tree.put(key, trim(assignment.substr(eq + 1)));
}

// ---------------------------------------------------------------- data

struct DataSplits {
    std::vector<PairSample> train;
    std::vector<PairSample> test;
    std::string source;
};

std::vector<PairSample> filter_tools(const std::vector<PairSample>& samples, const std::set<std::string>& tools)
{
    std::vector<PairSample> kept;
    for (const auto& s : samples) {
        if (s.label() == Label::BonaFide || tools.contains(s.tool_tag())) {
            kept.push_back(s);
        }
    }
    return kept;
}

void check_input_shape(const std::vector<PairSample>& samples, const ViTConfig& vit, const std::string& what)
{
    for (const auto& s : samples) {
        if (s.suspected().shape() != vit.image_shape()) {
            throw CompatibilityError(what + " images are " + shape_str(s.suspected().shape()) +
                                     " but the model expects " + shape_str(vit.image_shape()));
        }
    }
}

DataSplits synthetic_splits(const SynthConfig& synth, const std::vector<ArtefactModel>& train_tools,
                            const std::vector<ArtefactModel>& test_tools, const std::string& name)
{
    ProtocolOptions options;
    options.train_artefacts = train_tools;
    options.test_artefacts = test_tools;
    ProtocolSplit split = build_protocol(synth, options);
    return {std::move(split.train), std::move(split.test), "synthetic:" + name + ":seed=" + std::to_string(synth.seed)};
}

DataSplits manifest_splits(const fs::path& manifest)
{
    Dataset d = read_dataset(manifest);
    return {std::move(d.train), std::move(d.test), "manifest:" + manifest.generic_string()};
}

DataSplits primary_data(const ExperimentConfig& c, const std::vector<ArtefactModel>& train_tools,
                        const std::vector<ArtefactModel>& test_tools)
{
    if (c.data.manifest) {
        return manifest_splits(*c.data.manifest);
    }
    return synthetic_splits(c.data.synth, train_tools, test_tools, "A");
}

struct CrossDatabases {
    DataSplits a;
    DataSplits b;
};

CrossDatabases cross_databases(const ExperimentConfig& c)
{
    if (c.data.manifest) {
        if (!c.data.cross_manifest) {
            throw ValidationError("cross-database runs with data.manifest also need data.cross_manifest");
        }
        return {manifest_splits(*c.data.manifest), manifest_splits(*c.data.cross_manifest)};
    }
    return {synthetic_splits(c.data.synth, c.data.train_tools, c.data.test_tools, "A"),
            synthetic_splits(c.data.cross_synth(), c.data.train_tools, c.data.test_tools, "B")};
}

// ---------------------------------------------------------------- runs

std::mutex log_mutex;

void log_line(bool verbose, const std::string& line)
{
    if (verbose) {
        std::lock_guard lock(log_mutex);
        std::cerr << line << std::endl;
    }
}

TrainConfig effective_train(const ExperimentConfig& c)
{
    TrainConfig t = c.train;
    t.seed = c.seed;
    return t;
}

void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << text;
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

std::string report_row(const MetricsReport& r)
{
    std::string row = format_double(r.d_eer.rate) + "," + format_double(r.d_eer.threshold);
    for (const auto& b : r.bscer_at) {
        row += "," + format_double(b.point.rate);
    }
    row += "," + std::to_string(r.num_bona_fide) + "," + std::to_string(r.num_morph);
    return row;
}

DiffoundModel train_model(const ExperimentConfig& c, DetectorMode mode, const LoRAConfig& lora,
                          const std::vector<PairSample>& train_set, const fs::path& dir, const std::string& label,
                          bool verbose)
{
    check_input_shape(train_set, c.vit, "training");
    DiffoundModel model = DiffoundModel::build(c.vit, lora, mode, c.seed);
    fs::create_directories(dir);
    std::string log = "epoch,mean_loss\n";
    dfmad::train(model, train_set, effective_train(c), c.focal, [&](std::size_t epoch, double loss) {
        log += std::to_string(epoch + 1) + "," + format_double(loss) + "\n";
        char line[160];
        std::snprintf(line, sizeof(line), "[%s] epoch %zu/%zu loss %.6f", label.c_str(), epoch + 1, c.train.epochs,
                      loss);
        log_line(verbose, line);
    });
    write_text(dir / "train_log.csv", log);
    return model;
}

MetricsReport evaluate_into(const DiffoundModel& model, const std::vector<PairSample>& test, const fs::path& dir,
                            const std::string& title, std::size_t det_resolution)
{
    check_input_shape(test, model.vit_config(), "evaluation");
    const auto scores = score_dataset(model, test);
    return write_evaluation(dir, scores, title, det_resolution);
}

void write_run_manifest(const fs::path& dir, const ExperimentConfig& c, const std::string& command,
                        const DataSplits& data, const nlohmann::ordered_json& extra)
{
    auto counts = [](const std::vector<PairSample>& v) {
        std::size_t bf = 0;
        std::size_t m = 0;
        for (const auto& s : v) {
            (s.label() == Label::Morph ? m : bf) += 1;
        }
        return nlohmann::ordered_json{{"bonafide", bf}, {"morph", m}};
    };
    nlohmann::ordered_json config_lines = nlohmann::ordered_json::array();
    std::istringstream lines(c.canonical());
    for (std::string line; std::getline(lines, line);) {
        config_lines.push_back(line);
    }
    nlohmann::ordered_json manifest = {
        {"format", "dfmad-run"},
        {"version", 1},
        {"command", command},
        {"name", c.name},
        {"seed", c.seed},
        {"config_hash", c.hash()},
        {"provenance", provenance()},
        {"data", {{"source", data.source}, {"train", counts(data.train)}, {"test", counts(data.test)}}},
        {"config", config_lines},
    };
    for (const auto& [k, v] : extra.items()) {
        manifest[k] = v;
    }
    write_text(dir / "run.json", manifest.dump(2) + "\n");
}

constexpr const char* kProtocolHeader =
    "protocol,run,train_on,test_on,mode,d_eer,d_eer_threshold,bscer_at_macer_10,bscer_at_macer_5,bscer_at_macer_1,"
    "num_bonafide,num_morph\n";

void write_protocol_csv(const fs::path& path, ProtocolKind kind, const std::vector<RunSummary>& runs,
                        const std::vector<DetectorMode>& modes)
{
    std::string csv = kProtocolHeader;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& r = runs[i];
        csv += to_string(kind) + "," + r.label + "," + r.train_on + "," + r.test_on + "," + to_string(modes[i]) +
               "," + report_row(r.report) + "\n";
    }
    write_text(path, csv);
}

std::string lora_dir_name(const LoRAConfig& l)
{
    return "r" + std::to_string(l.rank) + "_a" + format_double(l.alpha) + "_d" + format_double(l.dropout);
}

} // namespace

// ---------------------------------------------------------------- public

std::string to_string(ProtocolKind kind)
{
    switch (kind) {
    case ProtocolKind::KnownAttackCross:
        return "known_attack_cross";
    case ProtocolKind::UnknownAttackLoo:
        return "unknown_attack_loo";
    case ProtocolKind::AblationSmad:
        return "ablation_smad";
    }
    return "unknown";
}

ProtocolKind parse_protocol_kind(const std::string& text)
{
    if (text == "known_attack_cross") {
        return ProtocolKind::KnownAttackCross;
    }
    if (text == "unknown_attack_loo") {
        return ProtocolKind::UnknownAttackLoo;
    }
    if (text == "ablation_smad") {
        return ProtocolKind::AblationSmad;
    }
    throw ValidationError("unknown protocol '" + text +
                          "' (expected known_attack_cross, unknown_attack_loo or ablation_smad)");
}

void GridAxes::validate() const
{
    if (ranks.empty() || alphas.empty() || dropouts.empty()) {
        throw ValidationError("every grid axis needs at least one value");
    }
    if (unrestricted) {
        return;
    }
    const std::set<std::size_t> rank_domain{2, 4, 8};
    const std::set<double> alpha_domain{4.0, 8.0, 16.0};
    const std::set<double> dropout_domain{0.2, 0.4};
    for (auto r : ranks) {
        if (!rank_domain.contains(r)) {
            throw ValidationError("grid rank " + std::to_string(r) + " outside {2,4,8} (set grid.unrestricted)");
        }
    }
    for (auto a : alphas) {
        if (!alpha_domain.contains(a)) {
            throw ValidationError("grid alpha " + format_double(a) + " outside {4,8,16} (set grid.unrestricted)");
        }
    }
    for (auto d : dropouts) {
        if (!dropout_domain.contains(d)) {
            throw ValidationError("grid dropout " + format_double(d) + " outside {0.2,0.4} (set grid.unrestricted)");
        }
    }
}

std::vector<LoRAConfig> GridAxes::expand(const LoRAConfig& base) const
{
    std::vector<LoRAConfig> cells;
    for (auto r : ranks) {
        for (auto a : alphas) {
            for (auto d : dropouts) {
                LoRAConfig cell = base;
                cell.rank = r;
                cell.alpha = a;
                cell.dropout = d;
                cells.push_back(cell);
            }
        }
    }
    return cells;
}

SynthConfig DataConfig::cross_synth() const
{
    SynthConfig b = synth;
    b.seed = cross_seed;
    b.brightness_offset = cross_brightness_offset;
    b.noise_std = cross_noise_std;
    return b;
}

std::string provenance()
{
#ifdef DFMAD_PROVENANCE
    return DFMAD_PROVENANCE;
#else
    return "unknown";
#endif
}

fs::path default_output_root()
{
    if (const char* env = std::getenv("DFMAD_OUTPUT_ROOT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "runs";
}

ExperimentConfig ExperimentConfig::load(const fs::path& path, const std::vector<std::string>& overrides)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    std::stringstream text;
    text << in.rdbuf();
    return parse(text.str(), overrides);
}

ExperimentConfig ExperimentConfig::parse(const std::string& ini_text, const std::vector<std::string>& overrides)
{
    pt::ptree tree;
    try {
        std::istringstream in(ini_text);
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ValidationError(std::string("malformed config: ") + e.what());
    }
    for (const auto& o : overrides) {
        apply_override(tree, o);
    }
    check_keys(tree);
    const Reader r(tree);

    ExperimentConfig c;
    c.name = r.required("experiment.name");
    c.seed = Reader::to_uint("experiment.seed", r.required("experiment.seed"));
    c.mode = parse_detector_mode(r.text("experiment.mode", "differential"));
    if (auto p = r.raw("experiment.protocol"); p && !p->empty()) {
        c.protocol = parse_protocol_kind(*p);
    }
    c.output_root = r.text("experiment.output_root", default_output_root().string());

    c.vit.image_size = r.uint("model.image_size", c.vit.image_size);
    c.vit.patch_size = r.uint("model.patch_size", c.vit.patch_size);
    c.vit.channels = r.uint("model.channels", c.vit.channels);
    c.vit.embed_dim = r.uint("model.embed_dim", c.vit.embed_dim);
    c.vit.num_heads = r.uint("model.num_heads", c.vit.num_heads);
    c.vit.num_layers = r.uint("model.num_layers", c.vit.num_layers);
    c.vit.mlp_ratio = r.real("model.mlp_ratio", c.vit.mlp_ratio);
    c.vit.layer_norm_eps = r.real("model.layer_norm_eps", c.vit.layer_norm_eps);

    c.lora.rank = r.uint("lora.rank", c.lora.rank);
    c.lora.alpha = r.real("lora.alpha", c.lora.alpha);
    c.lora.dropout = r.real("lora.dropout", c.lora.dropout);
    c.lora.scaling = parse_lora_scaling(r.text("lora.scaling", to_string(c.lora.scaling)));
    c.lora.target_query = r.flag("lora.target_query", c.lora.target_query);
    c.lora.target_value = r.flag("lora.target_value", c.lora.target_value);

    if (auto v = r.raw("grid.ranks")) {
        c.grid.ranks.clear();
        for (const auto& item : split_list(*v)) {
            c.grid.ranks.push_back(Reader::to_uint("grid.ranks", item));
        }
    }
    if (auto v = r.raw("grid.alphas")) {
        c.grid.alphas.clear();
        for (const auto& item : split_list(*v)) {
            c.grid.alphas.push_back(Reader::to_real("grid.alphas", item));
        }
    }
    if (auto v = r.raw("grid.dropouts")) {
        c.grid.dropouts.clear();
        for (const auto& item : split_list(*v)) {
            c.grid.dropouts.push_back(Reader::to_real("grid.dropouts", item));
        }
    }
    c.grid.unrestricted = r.flag("grid.unrestricted", false);
    c.grid_threads = static_cast<unsigned>(r.uint("grid.threads", 1));

    c.train.epochs = Reader::to_uint("train.epochs", r.required("train.epochs"));
    c.train.batch_size = r.uint("train.batch_size", c.train.batch_size);
    c.train.learning_rate = r.real("train.learning_rate", c.train.learning_rate);
    c.train.weight_decay = r.real("train.weight_decay", c.train.weight_decay);
    c.train.balanced_sampling = r.flag("train.balanced_sampling", c.train.balanced_sampling);
    c.train.augmentation.random_crop = r.flag("train.augment_crop", c.train.augmentation.random_crop);
    c.train.augmentation.horizontal_flip = r.flag("train.augment_flip", c.train.augmentation.horizontal_flip);
    c.train.augmentation.photometric = r.flag("train.augment_photometric", c.train.augmentation.photometric);
    c.train.augmentation.crop_fraction = r.real("train.crop_fraction", c.train.augmentation.crop_fraction);
    c.train.augmentation.flip_probability = r.real("train.flip_probability", c.train.augmentation.flip_probability);
    c.train.augmentation.photometric_range =
        r.real("train.photometric_range", c.train.augmentation.photometric_range);
    c.focal.alpha_t = r.real("train.focal_alpha", c.focal.alpha_t);
    c.focal.eta = r.real("train.focal_eta", c.focal.eta);

    auto& s = c.data.synth;
    if (auto m = r.raw("data.manifest"); m && !m->empty()) {
        c.data.manifest = fs::path(*m);
    }
    if (auto m = r.raw("data.cross_manifest"); m && !m->empty()) {
        c.data.cross_manifest = fs::path(*m);
    }
    c.data.image_format = parse_image_format(r.text("data.image_format", to_string(c.data.image_format)));
    s.seed = r.uint("data.seed", s.seed);
    s.num_identities = r.uint("data.num_identities", s.num_identities);
    s.captures_per_identity = r.uint("data.captures_per_identity", s.captures_per_identity);
    s.morphs_per_identity = r.uint("data.morphs_per_identity", s.morphs_per_identity);
    s.beta = r.real("data.beta", s.beta);
    s.artefact_strength = r.real("data.artefact_strength", s.artefact_strength);
    s.ghost_shift = r.real("data.ghost_shift", s.ghost_shift);
    s.texture_amplitude = r.real("data.texture_amplitude", s.texture_amplitude);
    s.noise_std = r.real("data.noise_std", s.noise_std);
    s.pose_jitter = r.real("data.pose_jitter", s.pose_jitter);
    s.contrast_jitter = r.real("data.contrast_jitter", s.contrast_jitter);
    s.illumination_jitter = r.real("data.illumination_jitter", s.illumination_jitter);
    s.brightness_offset = r.real("data.brightness_offset", s.brightness_offset);
    s.mirror_symmetric = r.flag("data.mirror_symmetric", s.mirror_symmetric);
    s.test_fraction = r.real("data.test_fraction", s.test_fraction);
    // Synthetic images follow the model input unless set explicitly.
    s.image_size = r.uint("data.image_size", c.vit.image_size);
    s.channels = r.uint("data.channels", c.vit.channels);
    if (auto v = r.raw("data.train_tools")) {
        c.data.train_tools = parse_tools(*v);
    }
    if (auto v = r.raw("data.test_tools")) {
        c.data.test_tools = parse_tools(*v);
    }
    if (auto v = r.raw("data.loo_tools")) {
        c.data.loo_tools = parse_tools(*v);
    }
    c.data.cross_seed = r.uint("data.cross_seed", c.data.cross_seed);
    c.data.cross_brightness_offset = r.real("data.cross_brightness_offset", c.data.cross_brightness_offset);
    c.data.cross_noise_std = r.real("data.cross_noise_std", c.data.cross_noise_std);

    c.det_resolution = r.uint("eval.det_resolution", 0);
    c.verbose = r.flag("experiment.verbose", true);

    c.validate();
    return c;
}

void ExperimentConfig::validate() const
{
    if (name.empty() || name.find_first_of("/\\") != std::string::npos) {
        throw ValidationError("experiment.name must be a non-empty plain name");
    }
    try {
        vit.validate();
        lora.validate_for(vit.embed_dim, vit.embed_dim);
        train.validate();
        focal.validate();
        data.synth.validate();
    } catch (const ValidationError&) {
        throw;
    } catch (const ConfigError& e) {
        throw ValidationError(e.what());
    }
    grid.validate();
    if (grid_threads == 0) {
        throw ValidationError("grid.threads must be at least 1");
    }
    if (data.train_tools.empty() || data.test_tools.empty()) {
        throw ValidationError("data.train_tools and data.test_tools must name at least one artefact model");
    }
}

std::string ExperimentConfig::canonical() const
{
    const auto& s = data.synth;
    const auto& a = train.augmentation;
    std::vector<std::pair<std::string, std::string>> kv = {
        {"experiment.name", name},
        {"experiment.seed", std::to_string(seed)},
        {"experiment.mode", to_string(mode)},
        {"experiment.protocol", protocol ? to_string(*protocol) : ""},
        {"model.image_size", std::to_string(vit.image_size)},
        {"model.patch_size", std::to_string(vit.patch_size)},
        {"model.channels", std::to_string(vit.channels)},
        {"model.embed_dim", std::to_string(vit.embed_dim)},
        {"model.num_heads", std::to_string(vit.num_heads)},
        {"model.num_layers", std::to_string(vit.num_layers)},
        {"model.mlp_ratio", format_double(vit.mlp_ratio)},
        {"model.layer_norm_eps", format_double(vit.layer_norm_eps)},
        {"lora.rank", std::to_string(lora.rank)},
        {"lora.alpha", format_double(lora.alpha)},
        {"lora.dropout", format_double(lora.dropout)},
        {"lora.scaling", to_string(lora.scaling)},
        {"lora.target_query", lora.target_query ? "true" : "false"},
        {"lora.target_value", lora.target_value ? "true" : "false"},
        {"grid.ranks", join_numbers(grid.ranks)},
        {"grid.alphas", join_numbers(grid.alphas)},
        {"grid.dropouts", join_numbers(grid.dropouts)},
        {"grid.unrestricted", grid.unrestricted ? "true" : "false"},
        {"train.epochs", std::to_string(train.epochs)},
        {"train.batch_size", std::to_string(train.batch_size)},
        {"train.learning_rate", format_double(train.learning_rate)},
        {"train.weight_decay", format_double(train.weight_decay)},
        {"train.balanced_sampling", train.balanced_sampling ? "true" : "false"},
        {"train.augment_crop", a.random_crop ? "true" : "false"},
        {"train.augment_flip", a.horizontal_flip ? "true" : "false"},
        {"train.augment_photometric", a.photometric ? "true" : "false"},
        {"train.crop_fraction", format_double(a.crop_fraction)},
        {"train.flip_probability", format_double(a.flip_probability)},
        {"train.photometric_range", format_double(a.photometric_range)},
        {"train.focal_alpha", format_double(focal.alpha_t)},
        {"train.focal_eta", format_double(focal.eta)},
        {"data.manifest", data.manifest ? data.manifest->generic_string() : ""},
        {"data.cross_manifest", data.cross_manifest ? data.cross_manifest->generic_string() : ""},
        {"data.image_format", to_string(data.image_format)},
        {"data.seed", std::to_string(s.seed)},
        {"data.num_identities", std::to_string(s.num_identities)},
        {"data.captures_per_identity", std::to_string(s.captures_per_identity)},
        {"data.morphs_per_identity", std::to_string(s.morphs_per_identity)},
        {"data.beta", format_double(s.beta)},
        {"data.artefact_strength", format_double(s.artefact_strength)},
        {"data.ghost_shift", format_double(s.ghost_shift)},
        {"data.texture_amplitude", format_double(s.texture_amplitude)},
        {"data.noise_std", format_double(s.noise_std)},
        {"data.pose_jitter", format_double(s.pose_jitter)},
        {"data.contrast_jitter", format_double(s.contrast_jitter)},
        {"data.illumination_jitter", format_double(s.illumination_jitter)},
        {"data.brightness_offset", format_double(s.brightness_offset)},
        {"data.mirror_symmetric", s.mirror_symmetric ? "true" : "false"},
        {"data.test_fraction", format_double(s.test_fraction)},
        {"data.image_size", std::to_string(s.image_size)},
        {"data.channels", std::to_string(s.channels)},
        {"data.train_tools", join_tools(data.train_tools)},
        {"data.test_tools", join_tools(data.test_tools)},
        {"data.loo_tools", join_tools(data.loo_tools)},
        {"data.cross_seed", std::to_string(data.cross_seed)},
        {"data.cross_brightness_offset", format_double(data.cross_brightness_offset)},
        {"data.cross_noise_std", format_double(data.cross_noise_std)},
        {"eval.det_resolution", std::to_string(det_resolution)},
    };
    std::sort(kv.begin(), kv.end());
    std::string out;
    for (const auto& [k, v] : kv) {
        out += k + "=" + v + "\n";
    }
    return out;
}

std::string ExperimentConfig::hash() const
{
    return fnv1a_hex(canonical());
}

std::vector<ScoreRecord> score_dataset(const DiffoundModel& model, std::span<const PairSample> samples)
{
    std::vector<ScoreRecord> records;
    records.reserve(samples.size());
    for (const auto& s : samples) {
        records.push_back({s.pair_id(), s.label(), model.score(s), s.tool_tag()});
    }
    return records;
}

MetricsReport write_evaluation(const fs::path& dir, std::span<const ScoreRecord> scores, const std::string& title,
                               std::size_t det_resolution)
{
    fs::create_directories(dir);
    MetricsReport report = compute_report(scores);
    if (det_resolution > 0) {
        report.det = det_curve(scores, det_resolution);
    }
    write_scores(dir / "scores.csv", scores);
    write_report(dir / "report.txt", report);
    write_det_csv(dir / "det.csv", report.det);
    const std::vector<DetSeries> series{{title, report.det}};
    write_det_svg(dir / "det.svg", series, title);
    return report;
}

RunSummary cmd_train(const ExperimentConfig& c)
{
    const DataSplits data = primary_data(c, c.data.train_tools, c.data.test_tools);
    const fs::path dir = c.output_dir();
    fs::create_directories(dir);
    log_line(c.verbose, "train: " + std::to_string(data.train.size()) + " training pairs, " +
                            std::to_string(data.test.size()) + " test pairs -> " + dir.string());
    const DiffoundModel model = train_model(c, c.mode, c.lora, data.train, dir, c.name, c.verbose);
    model.save(dir / "model");
    RunSummary summary;
    summary.label = c.name;
    summary.train_on = data.source;
    summary.test_on = data.source;
    summary.dir = dir;
    summary.report = evaluate_into(model, data.test, dir, c.name, c.det_resolution);
    write_run_manifest(dir, c, "train", data,
                       {{"mode", to_string(c.mode)}, {"model_config_hash", model.config_hash()}});
    return summary;
}

RunSummary cmd_eval(const ExperimentConfig& c, const fs::path& model_dir)
{
    const DiffoundModel model = DiffoundModel::load(model_dir);
    DataSplits data;
    if (c.data.manifest) {
        data = manifest_splits(*c.data.manifest);
    } else {
        data = synthetic_splits(c.data.synth, c.data.train_tools, c.data.test_tools, "A");
    }
    if (!data.test.empty() && input_signature(data.test.front().suspected().shape()) != model.input_signature()) {
        throw CompatibilityError("dataset images " + shape_str(data.test.front().suspected().shape()) +
                                 " do not match the checkpoint input signature " + model.input_signature());
    }
    const fs::path dir = c.output_dir() / "eval";
    RunSummary summary;
    summary.label = c.name + "-eval";
    summary.train_on = model_dir.generic_string();
    summary.test_on = data.source;
    summary.dir = dir;
    summary.report = evaluate_into(model, data.test, dir, summary.label, c.det_resolution);
    write_run_manifest(dir, c, "eval", data,
                       {{"model_dir", model_dir.generic_string()}, {"model_config_hash", model.config_hash()}});
    return summary;
}

std::vector<GridCell> cmd_grid(const ExperimentConfig& c)
{
    const std::vector<LoRAConfig> lora_cells = c.grid.expand(c.lora);
    for (const auto& l : lora_cells) {
        l.validate_for(c.vit.embed_dim, c.vit.embed_dim);
    }
    const auto [a, b] = cross_databases(c);
    const fs::path root = c.output_dir() / "grid";
    fs::create_directories(root);
    std::vector<GridCell> cells(lora_cells.size());
    std::vector<std::exception_ptr> errors(lora_cells.size());

    auto run_cell = [&](std::size_t i) {
        GridCell& cell = cells[i];
        cell.lora = lora_cells[i];
        const std::string name = lora_dir_name(cell.lora);
        try {
            const DiffoundModel model_a =
                train_model(c, c.mode, cell.lora, a.train, root / name / "train_A", name + " A", c.verbose);
            cell.a_to_b = evaluate_into(model_a, b.test, root / name / "A_to_B", name + " A_to_B", c.det_resolution);
            const DiffoundModel model_b =
                train_model(c, c.mode, cell.lora, b.train, root / name / "train_B", name + " B", c.verbose);
            cell.b_to_a = evaluate_into(model_b, a.test, root / name / "B_to_A", name + " B_to_A", c.det_resolution);
            cell.mean_d_eer = 0.5 * (cell.a_to_b.d_eer.rate + cell.b_to_a.d_eer.rate);
            for (std::size_t t = 0; t < kMacerTargets.size(); ++t) {
                cell.mean_bscer_at[t] = 0.5 * (cell.a_to_b.bscer_at[t].point.rate + cell.b_to_a.bscer_at[t].point.rate);
            }
        } catch (const std::exception& e) {
            cell.error = e.what();
            errors[i] = std::current_exception();
            log_line(c.verbose, "[" + name + "] failed: " + cell.error);
        }
    };
    const unsigned threads = std::min<unsigned>(c.grid_threads, static_cast<unsigned>(cells.size()));
    if (threads <= 1) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            run_cell(i);
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < cells.size(); i = next++) {
                    run_cell(i);
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (!cells[i].ok()) {
            continue;
        }
        if (!best || cells[i].mean_d_eer < cells[*best].mean_d_eer ||
            (cells[i].mean_d_eer == cells[*best].mean_d_eer &&
             cells[i].mean_bscer_at[0] < cells[*best].mean_bscer_at[0])) {
            best = i;
        }
    }
    if (best) {
        cells[*best].best = true;
    }

    auto metric_cols = [](const std::string& prefix) {
        std::string cols = prefix + "d_eer";
        for (double t : kMacerTargets) {
            cols += "," + prefix + "bscer_at_macer_" + std::to_string(static_cast<int>(t));
        }
        return cols;
    };
    auto metric_vals = [](double d_eer, const std::array<double, 3>& bscer) {
        std::string vals = format_double(d_eer);
        for (double v : bscer) {
            vals += "," + format_double(v);
        }
        return vals;
    };
    auto report_vals = [&](const MetricsReport& r) {
        std::array<double, 3> bscer{};
        for (std::size_t t = 0; t < bscer.size(); ++t) {
            bscer[t] = r.bscer_at[t].point.rate;
        }
        return metric_vals(r.d_eer.rate, bscer);
    };
    std::string csv = "rank,alpha,dropout,scaling,status," + metric_cols("A_to_B_") + "," + metric_cols("B_to_A_") +
                      "," + metric_cols("mean_") + ",best,error\n";
    for (const auto& cell : cells) {
        csv += std::to_string(cell.lora.rank) + "," + format_double(cell.lora.alpha) + "," +
               format_double(cell.lora.dropout) + "," + to_string(cell.lora.scaling) + ",";
        if (cell.ok()) {
            csv += "ok," + report_vals(cell.a_to_b) + "," + report_vals(cell.b_to_a) + "," +
                   metric_vals(cell.mean_d_eer, cell.mean_bscer_at);
        } else {
            csv += "failed" + std::string(3 * (1 + kMacerTargets.size()), ',');
        }
        std::string error = cell.error;
        std::replace_if(
            error.begin(), error.end(), [](char ch) { return ch == ',' || ch == '\n' || ch == '\r'; }, ';');
        csv += std::string(cell.best ? ",true," : ",false,") + error + "\n";
    }
    write_text(c.output_dir() / "grid.csv", csv);

    const auto failed = std::count_if(cells.begin(), cells.end(), [](const GridCell& g) { return !g.ok(); });
    nlohmann::ordered_json extra = {{"cells", cells.size()},
                                    {"failed_cells", failed},
                                    {"best", best ? lora_dir_name(cells[*best].lora) : ""},
                                    {"databases", {{"A", a.source}, {"B", b.source}}}};
    write_run_manifest(c.output_dir(), c, "grid", a, extra);
    if (!best) {
        std::rethrow_exception(errors.front());
    }
    return cells;
}

std::vector<RunSummary> cmd_protocol(const ExperimentConfig& c)
{
    if (!c.protocol) {
        throw ValidationError("experiment.protocol must be set for the protocol command");
    }
    const ProtocolKind kind = *c.protocol;
    const fs::path root = c.output_dir();
    fs::create_directories(root);
    std::vector<RunSummary> runs;
    std::vector<DetectorMode> modes;
    nlohmann::ordered_json extra = {{"protocol", to_string(kind)}};
    DataSplits primary;

    auto add_run = [&](const DiffoundModel& model, const std::vector<PairSample>& test, const std::string& label,
                       const std::string& train_on, const std::string& test_on) {
        RunSummary r;
        r.label = label;
        r.train_on = train_on;
        r.test_on = test_on;
        r.dir = root / label;
        r.report = evaluate_into(model, test, r.dir, label, c.det_resolution);
        runs.push_back(std::move(r));
        modes.push_back(model.mode());
    };

    switch (kind) {
    case ProtocolKind::KnownAttackCross: {
        auto [a, b] = cross_databases(c);
        const DiffoundModel model_a = train_model(c, c.mode, c.lora, a.train, root / "train_A", "train_A", c.verbose);
        add_run(model_a, b.test, "A_to_B", "A", "B");
        add_run(model_a, a.test, "A_to_A", "A", "A");
        const DiffoundModel model_b = train_model(c, c.mode, c.lora, b.train, root / "train_B", "train_B", c.verbose);
        add_run(model_b, a.test, "B_to_A", "B", "A");
        add_run(model_b, b.test, "B_to_B", "B", "B");
        extra["databases"] = {{"A", a.source}, {"B", b.source}};
        primary = std::move(a);
        break;
    }
    case ProtocolKind::UnknownAttackLoo: {
        std::vector<std::string> tools;
        if (c.data.manifest) {
            primary = manifest_splits(*c.data.manifest);
            std::set<std::string> tags;
            for (const auto& s : primary.train) {
                if (s.label() == Label::Morph) {
                    tags.insert(s.tool_tag());
                }
            }
            tools.assign(tags.begin(), tags.end());
        } else {
            primary = synthetic_splits(c.data.synth, c.data.loo_tools, c.data.loo_tools, "A");
            for (auto t : c.data.loo_tools) {
                tools.push_back(to_string(t));
            }
        }
        std::sort(tools.begin(), tools.end());
        tools.erase(std::unique(tools.begin(), tools.end()), tools.end());
        if (tools.size() < 2) {
            throw ProtocolError("unknown_attack_loo needs at least 2 morphing tools, got " +
                                std::to_string(tools.size()));
        }
        nlohmann::ordered_json held = nlohmann::ordered_json::array();
        for (const auto& held_out : tools) {
            std::set<std::string> seen;
            std::string seen_label;
            for (const auto& t : tools) {
                if (t != held_out) {
                    seen.insert(t);
                    seen_label += (seen_label.empty() ? "" : "+") + t;
                }
            }
            const std::set<std::string> unseen{held_out};
            struct Direction {
                const char* name;
                const std::vector<PairSample>* train_on;
                const std::vector<PairSample>* test_on;
                const char* train_split;
                const char* test_split;
            };
            const Direction directions[] = {
                {"train_to_test", &primary.train, &primary.test, "train", "test"},
                {"test_to_train", &primary.test, &primary.train, "test", "train"},
            };
            for (const auto& d : directions) {
                const std::string run = "holdout_" + held_out + "_" + d.name;
                const DiffoundModel model =
                    train_model(c, c.mode, c.lora, filter_tools(*d.train_on, seen), root / run, run, c.verbose);
                add_run(model, filter_tools(*d.test_on, unseen), run, std::string(d.train_split) + ":" + seen_label,
                        std::string(d.test_split) + ":" + held_out);
            }
            held.push_back(held_out);
        }
        extra["held_out"] = held;
        break;
    }
    case ProtocolKind::AblationSmad: {
        primary = primary_data(c, c.data.train_tools, c.data.test_tools);
        const DiffoundModel differential = train_model(c, DetectorMode::Differential, c.lora, primary.train,
                                                       root / "differential", "differential", c.verbose);
        add_run(differential, primary.test, "differential", "A", "A");

        const std::size_t reads_before = PairSample::live_image_reads();
        const DiffoundModel single = train_model(c, DetectorMode::SingleImage, c.lora, primary.train,
                                                 root / "single_image", "single_image", c.verbose);
        add_run(single, primary.test, "single_image", "A", "A");
        const std::size_t live_reads = PairSample::live_image_reads() - reads_before;

        const std::vector<DetSeries> series{{"differential (D-MAD)", runs[0].report.det},
                                            {"single image (S-MAD)", runs[1].report.det}};
        write_det_csv(root / "det_differential.csv", runs[0].report.det);
        write_det_csv(root / "det_single_image.csv", runs[1].report.det);
        write_det_svg(root / "det_ablation.svg", series, "Differential vs single-image detection");
        extra["single_image_live_reads"] = live_reads;
        if (live_reads != 0) {
            throw ContractError("single-image run read " + std::to_string(live_reads) + " live images");
        }
        break;
    }
    }

    write_protocol_csv(root / "protocol.csv", kind, runs, modes);
    write_run_manifest(root, c, "protocol", primary, extra);
    return runs;
}

ProtocolSplit cmd_gen_data(const ExperimentConfig& c, const fs::path& dir)
{
    ProtocolOptions options;
    options.train_artefacts = c.data.train_tools;
    options.test_artefacts = c.data.test_tools;
    ProtocolSplit split = build_protocol(c.data.synth, options);
    write_dataset(dir, split, c.data.image_format);
    return split;
}

MetricsReport cmd_metrics(const fs::path& scores, const fs::path& out_dir, std::size_t det_resolution)
{
    const auto records = read_scores(scores);
    return write_evaluation(out_dir, records, scores.stem().string(), det_resolution);
}

} // namespace dfmad
