#include "dfmad/model.hpp"

#include <fstream>

#include <nlohmann/json.hpp>

#include "dfmad/error.hpp"

namespace dfmad {

namespace {

constexpr const char* kManifestFormat = "dfmad-model";
constexpr int kManifestVersion = 1;

std::string canonical_config(const ViTConfig& v, const LoRAConfig& l, DetectorMode mode, bool reverse)
{
    return "vit:" + std::to_string(v.image_size) + "," + std::to_string(v.patch_size) + "," +
           std::to_string(v.channels) + "," + std::to_string(v.embed_dim) + "," + std::to_string(v.num_heads) + "," +
           std::to_string(v.num_layers) + "," + format_double(v.mlp_ratio) + "," + format_double(v.layer_norm_eps) +
           ";lora:" + std::to_string(l.rank) + "," + format_double(l.alpha) + "," + format_double(l.dropout) + "," +
           to_string(l.scaling) + "," + (l.target_query ? "q" : "") + (l.target_value ? "v" : "") +
           ";mode:" + to_string(mode) + ";reverse:" + (reverse ? "1" : "0");
}

} // namespace

std::string to_string(DetectorMode mode)
{
    return mode == DetectorMode::Differential ? "differential" : "single_image";
}

DetectorMode parse_detector_mode(const std::string& text)
{
    if (text == "differential") {
        return DetectorMode::Differential;
    }
    if (text == "single_image" || text == "smad") {
        return DetectorMode::SingleImage;
    }
    throw ConfigError("unknown detector mode '" + text + "'");
}

std::string fnv1a_hex(const std::string& text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string input_signature(const Shape& image_shape)
{
    std::string out;
    for (std::size_t d : image_shape) {
        out += (out.empty() ? "" : "x") + std::to_string(d);
    }
    return out;
}

DiffoundModel DiffoundModel::build(const ViTConfig& vit, const LoRAConfig& lora, DetectorMode mode, std::uint64_t seed)
{
    auto backbone = std::make_shared<EncoderWeights>(EncoderWeights::initialize(vit, derive_seed(seed, {1})));
    return build(std::move(backbone), lora, mode, seed);
}

DiffoundModel DiffoundModel::build(std::shared_ptr<EncoderWeights> backbone, const LoRAConfig& lora, DetectorMode mode,
                                   std::uint64_t seed)
{
    backbone->config.validate();
    lora.validate_for(backbone->config.embed_dim, backbone->config.embed_dim);
    backbone->set_trainable(false);

    DiffoundModel m;
    m.backbone_ = std::move(backbone);
    m.lora_ = lora;
    m.mode_ = mode;
    Rng rng_m(derive_seed(seed, {2}));
    m.branch_m_ = make_adapters(*m.backbone_, lora, rng_m);
    if (mode == DetectorMode::Differential) {
        Rng rng_l(derive_seed(seed, {3}));
        m.branch_l_ = make_adapters(*m.backbone_, lora, rng_l);
    }
    m.head_weight_ = parameter(Tensor({1, m.backbone_->config.embed_dim}));
    m.head_bias_ = parameter(Tensor({1}));
    return m;
}

Var DiffoundModel::embed_suspected(const Tensor& image, const ForwardContext& ctx) const
{
    return encode(image, *backbone_, &branch_m_, ctx);
}

Var DiffoundModel::embed_live(const Tensor& image, const ForwardContext& ctx) const
{
    if (mode_ != DetectorMode::Differential) {
        throw ContractError("single-image model has no live-capture branch");
    }
    return encode(image, *backbone_, &branch_l_, ctx);
}

Var DiffoundModel::differential_embedding(const Tensor& suspected, const Tensor& live, const ForwardContext& ctx) const
{
    if (mode_ != DetectorMode::Differential) {
        throw ContractError("differential_embedding requires differential mode");
    }
    const Var e_m = embed_suspected(suspected, ctx);
    const Var e_l = embed_live(live, ctx);
    return reverse_difference ? sub(e_m, e_l) : sub(e_l, e_m);
}

Var DiffoundModel::differential_embedding(const PairSample& pair, const ForwardContext& ctx) const
{
    if (mode_ != DetectorMode::Differential) {
        throw ContractError("differential_embedding requires differential mode");
    }
    return differential_embedding(pair.suspected(), pair.live(), ctx);
}

Var DiffoundModel::logit(const Tensor& suspected, const Tensor* live, const ForwardContext& ctx) const
{
    Var features;
    if (mode_ == DetectorMode::Differential) {
        if (live == nullptr) {
            throw ContractError("differential mode needs a live capture");
        }
        features = differential_embedding(suspected, *live, ctx);
    } else {
        features = embed_suspected(suspected, ctx);
    }
    return reshape(linear(features, head_weight_, head_bias_), Shape{});
}

Var DiffoundModel::logit(const PairSample& pair, const ForwardContext& ctx) const
{
    if (mode_ == DetectorMode::Differential) {
        return logit(pair.suspected(), &pair.live(), ctx);
    }
    return logit(pair.suspected(), nullptr, ctx);
}

double DiffoundModel::score(const PairSample& pair) const
{
    NoGradGuard no_grad;
    return sigmoid(logit(pair))->value.item();
}

ParameterRegistry DiffoundModel::registry() const
{
    ParameterRegistry reg;
    reg.append(backbone_->registry(), "backbone.");
    reg.append(adapter_registry(branch_m_), "branch_m.");
    if (mode_ == DetectorMode::Differential) {
        reg.append(adapter_registry(branch_l_), "branch_l.");
    }
    reg.add("head.weight", head_weight_, true);
    reg.add("head.bias", head_bias_, true);
    return reg;
}

std::vector<Var> DiffoundModel::trainable_parameters() const
{
    return registry().trainable_vars();
}

std::vector<Var> DiffoundModel::frozen_parameters() const
{
    return registry().frozen_vars();
}

std::string DiffoundModel::config_hash() const
{
    return fnv1a_hex(canonical_config(backbone_->config, lora_, mode_, reverse_difference));
}

std::string DiffoundModel::input_signature() const
{
    return dfmad::input_signature(backbone_->config.image_shape());
}

void DiffoundModel::save(const std::filesystem::path& dir) const
{
    std::filesystem::create_directories(dir);
    write_archive(dir / "backbone.dfa", backbone_->to_archive());
    write_archive(dir / "adapters_m.dfa", adapters_to_archive(branch_m_, lora_));
    if (mode_ == DetectorMode::Differential) {
        write_archive(dir / "adapters_l.dfa", adapters_to_archive(branch_l_, lora_));
    }
    ArrayArchive head;
    head.metadata = {{"kind", "head"}};
    head.add("head.weight", head_weight_->value, false);
    head.add("head.bias", head_bias_->value, false);
    write_archive(dir / "head.dfa", head);

    const ViTConfig& v = backbone_->config;
    nlohmann::ordered_json manifest = {
        {"format", kManifestFormat},
        {"version", kManifestVersion},
        {"mode", to_string(mode_)},
        {"reverse_difference", reverse_difference},
        {"config_hash", config_hash()},
        {"input_signature", input_signature()},
        {"vit",
         {{"image_size", v.image_size},
          {"patch_size", v.patch_size},
          {"channels", v.channels},
          {"embed_dim", v.embed_dim},
          {"num_heads", v.num_heads},
          {"num_layers", v.num_layers},
          {"mlp_ratio", v.mlp_ratio}}},
        {"lora",
         {{"rank", lora_.rank},
          {"alpha", lora_.alpha},
          {"dropout", lora_.dropout},
          {"scaling", to_string(lora_.scaling)}}},
        {"files",
         {{"backbone", "backbone.dfa"},
          {"branch_m", "adapters_m.dfa"},
          {"branch_l", mode_ == DetectorMode::Differential ? "adapters_l.dfa" : ""},
          {"head", "head.dfa"}}},
    };
    std::ofstream out(dir / "manifest.json");
    if (!out) {
        throw IoError("cannot write " + (dir / "manifest.json").string());
    }
    out << manifest.dump(2) << '\n';
}

DiffoundModel DiffoundModel::load(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in) {
        throw IoError("cannot open checkpoint manifest " + (dir / "manifest.json").string());
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("malformed checkpoint manifest " + (dir / "manifest.json").string() + ": " + e.what());
    }
    if (manifest.value("format", "") != kManifestFormat || manifest.value("version", 0) != kManifestVersion) {
        throw CompatibilityError("unsupported checkpoint format in " + dir.string());
    }

    DiffoundModel m;
    m.backbone_ = std::make_shared<EncoderWeights>(EncoderWeights::from_archive(read_archive(dir / "backbone.dfa")));
    m.backbone_->set_trainable(false);
    m.mode_ = parse_detector_mode(manifest.at("mode").get<std::string>());
    m.reverse_difference = manifest.value("reverse_difference", false);
    const ArrayArchive adapters_m = read_archive(dir / "adapters_m.dfa");
    m.lora_ = lora_config_from_metadata(adapters_m);
    m.branch_m_ = adapters_from_archive(adapters_m, *m.backbone_);
    if (m.mode_ == DetectorMode::Differential) {
        m.branch_l_ = adapters_from_archive(read_archive(dir / "adapters_l.dfa"), *m.backbone_);
    }
    const ArrayArchive head = read_archive(dir / "head.dfa");
    m.head_weight_ = parameter(head.get("head.weight").tensor);
    m.head_bias_ = parameter(head.get("head.bias").tensor);
    if (m.head_weight_->value.shape() != Shape{1, m.backbone_->config.embed_dim}) {
        throw CompatibilityError("head weight shape does not match backbone in " + dir.string());
    }
    if (manifest.at("config_hash").get<std::string>() != m.config_hash()) {
        throw CompatibilityError("checkpoint " + dir.string() + " config hash " +
                                 manifest.at("config_hash").get<std::string>() + " does not match its contents (" +
                                 m.config_hash() + ")");
    }
    return m;
}

ParameterRegistry count_model_parameters(const ViTConfig& vit, const LoRAConfig& lora, DetectorMode mode)
{
    ParameterRegistry reg;
    reg.append(count_encoder_parameters(vit), "backbone.");
    reg.append(count_adapter_parameters(vit, lora), "branch_m.");
    if (mode == DetectorMode::Differential) {
        reg.append(count_adapter_parameters(vit, lora), "branch_l.");
    }
    reg.add_count("head.weight", vit.embed_dim, true);
    reg.add_count("head.bias", 1, true);
    return reg;
}

} // namespace dfmad
