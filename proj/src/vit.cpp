#include "dfmad/vit.hpp"

#include <cmath>

#include "dfmad/error.hpp"

namespace dfmad {

namespace {

struct ParamSpec {
    std::string name;
    Shape shape;
};

// Canonical parameter list shared by initialisation, serialisation and counting.
std::vector<ParamSpec> encoder_specs(const ViTConfig& c)
{
    const std::size_t d = c.embed_dim;
    const std::size_t h = c.mlp_dim();
    std::vector<ParamSpec> specs{
        {"patch.weight", {d, c.patch_dim()}},
        {"patch.bias", {d}},
        {"cls_token", {1, d}},
        {"pos_embedding", {c.num_tokens(), d}},
    };
    for (std::size_t i = 0; i < c.num_layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        for (const auto& s : std::vector<ParamSpec>{
                 {"ln1.gain", {d}},      {"ln1.bias", {d}},    {"attn.q.weight", {d, d}}, {"attn.q.bias", {d}},
                 {"attn.k.weight", {d, d}}, {"attn.k.bias", {d}}, {"attn.v.weight", {d, d}}, {"attn.v.bias", {d}},
                 {"attn.o.weight", {d, d}}, {"attn.o.bias", {d}}, {"ln2.gain", {d}},        {"ln2.bias", {d}},
                 {"mlp.in.weight", {h, d}}, {"mlp.in.bias", {h}}, {"mlp.out.weight", {d, h}}, {"mlp.out.bias", {d}},
             }) {
            specs.push_back({p + s.name, s.shape});
        }
    }
    specs.push_back({"final_norm.gain", {d}});
    specs.push_back({"final_norm.bias", {d}});
    return specs;
}

std::vector<Var*> encoder_slots(EncoderWeights& w)
{
    std::vector<Var*> slots{&w.patch_weight, &w.patch_bias, &w.cls_token, &w.pos_embedding};
    for (auto& b : w.blocks) {
        for (Var* v : {&b.ln1_gain, &b.ln1_bias, &b.query_weight, &b.query_bias, &b.key_weight, &b.key_bias,
                       &b.value_weight, &b.value_bias, &b.out_weight, &b.out_bias, &b.ln2_gain, &b.ln2_bias,
                       &b.mlp_in_weight, &b.mlp_in_bias, &b.mlp_out_weight, &b.mlp_out_bias}) {
            slots.push_back(v);
        }
    }
    slots.push_back(&w.final_gain);
    slots.push_back(&w.final_bias);
    return slots;
}

Tensor init_tensor(const std::string& name, const Shape& shape, Rng& rng)
{
    auto ends_with = [&](std::string_view suffix) {
        return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    if (ends_with(".gain")) {
        return Tensor(shape, 1.0);
    }
    if (ends_with("ln1.bias") || ends_with("ln2.bias") || ends_with("final_norm.bias")) {
        return Tensor(shape);
    }
    if (ends_with(".weight")) {
        // Unit-variance fan-in scaling keeps activations O(1) through random blocks.
        return randn(shape, 1.0 / std::sqrt(static_cast<double>(shape[1])), rng);
    }
    return randn(shape, 0.02, rng);
}

} // namespace

std::size_t ViTConfig::mlp_dim() const
{
    return static_cast<std::size_t>(std::llround(mlp_ratio * static_cast<double>(embed_dim)));
}

void ViTConfig::validate() const
{
    if (image_size == 0 || patch_size == 0 || channels == 0 || embed_dim == 0 || num_heads == 0 || num_layers == 0) {
        throw ConfigError("ViT dimensions must be positive");
    }
    if (image_size % patch_size != 0) {
        throw ConfigError("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (embed_dim % num_heads != 0) {
        throw ConfigError("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                          std::to_string(num_heads));
    }
    if (!(mlp_ratio > 0.0) || mlp_dim() == 0) {
        throw ConfigError("mlp_ratio must be positive");
    }
    if (!(layer_norm_eps > 0.0)) {
        throw ConfigError("layer_norm_eps must be positive");
    }
}

EncoderWeights EncoderWeights::initialize(const ViTConfig& config, std::uint64_t seed)
{
    config.validate();
    EncoderWeights w;
    w.config = config;
    w.blocks.resize(config.num_layers);
    Rng rng(derive_seed(seed, {0xB0C0}));
    const auto specs = encoder_specs(config);
    const auto slots = encoder_slots(w);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        *slots[i] = constant(init_tensor(specs[i].name, specs[i].shape, rng));
    }
    return w;
}

EncoderWeights EncoderWeights::from_archive(const ArrayArchive& archive)
{
    ViTConfig c;
    c.image_size = std::stoul(archive.meta("vit.image_size"));
    c.patch_size = std::stoul(archive.meta("vit.patch_size"));
    c.channels = std::stoul(archive.meta("vit.channels"));
    c.embed_dim = std::stoul(archive.meta("vit.embed_dim"));
    c.num_heads = std::stoul(archive.meta("vit.num_heads"));
    c.num_layers = std::stoul(archive.meta("vit.num_layers"));
    c.mlp_ratio = std::stod(archive.meta("vit.mlp_ratio"));
    c.layer_norm_eps = std::stod(archive.meta("vit.layer_norm_eps"));
    c.validate();

    EncoderWeights w;
    w.config = c;
    w.blocks.resize(c.num_layers);
    const auto specs = encoder_specs(c);
    const auto slots = encoder_slots(w);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const NamedArray& a = archive.get(specs[i].name);
        if (a.tensor.shape() != specs[i].shape) {
            throw CompatibilityError("backbone array '" + specs[i].name + "' has shape " +
                                     shape_str(a.tensor.shape()) + ", expected " + shape_str(specs[i].shape));
        }
        *slots[i] = a.frozen ? constant(a.tensor) : parameter(a.tensor);
    }
    return w;
}

ArrayArchive EncoderWeights::to_archive() const
{
    ArrayArchive archive;
    archive.metadata = {
        {"kind", "backbone"},
        {"vit.image_size", std::to_string(config.image_size)},
        {"vit.patch_size", std::to_string(config.patch_size)},
        {"vit.channels", std::to_string(config.channels)},
        {"vit.embed_dim", std::to_string(config.embed_dim)},
        {"vit.num_heads", std::to_string(config.num_heads)},
        {"vit.num_layers", std::to_string(config.num_layers)},
        {"vit.mlp_ratio", format_double(config.mlp_ratio)},
        {"vit.layer_norm_eps", format_double(config.layer_norm_eps)},
    };
    for (const auto& [name, var] : named_parameters()) {
        archive.add(name, var->value, !var->requires_grad);
    }
    return archive;
}

void EncoderWeights::set_trainable(bool trainable)
{
    for (Var* slot : encoder_slots(*this)) {
        (*slot)->requires_grad = trainable;
        (*slot)->zero_grad();
    }
}

std::vector<std::pair<std::string, Var>> EncoderWeights::named_parameters() const
{
    auto& self = const_cast<EncoderWeights&>(*this);
    const auto specs = encoder_specs(config);
    const auto slots = encoder_slots(self);
    std::vector<std::pair<std::string, Var>> out;
    out.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
        out.emplace_back(specs[i].name, *slots[i]);
    }
    return out;
}

ParameterRegistry EncoderWeights::registry() const
{
    ParameterRegistry reg;
    for (const auto& [name, var] : named_parameters()) {
        reg.add(name, var, var->requires_grad);
    }
    return reg;
}

AdapterSet make_adapters(const EncoderWeights& weights, const LoRAConfig& config, Rng& rng)
{
    config.validate();
    AdapterSet set(weights.blocks.size());
    for (std::size_t i = 0; i < weights.blocks.size(); ++i) {
        const BlockWeights& b = weights.blocks[i];
        if (config.target_query) {
            set[i].query.emplace(b.query_weight, b.query_bias, config, rng);
        }
        if (config.target_value) {
            set[i].value.emplace(b.value_weight, b.value_bias, config, rng);
        }
    }
    return set;
}

ParameterRegistry adapter_registry(const AdapterSet& adapters)
{
    ParameterRegistry reg;
    for (std::size_t i = 0; i < adapters.size(); ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        if (adapters[i].query) {
            reg.add(p + "q.lora_A", adapters[i].query->a(), true);
            reg.add(p + "q.lora_B", adapters[i].query->b(), true);
        }
        if (adapters[i].value) {
            reg.add(p + "v.lora_A", adapters[i].value->a(), true);
            reg.add(p + "v.lora_B", adapters[i].value->b(), true);
        }
    }
    return reg;
}

ArrayArchive adapters_to_archive(const AdapterSet& adapters, const LoRAConfig& config)
{
    ArrayArchive archive;
    archive.metadata = {
        {"kind", "lora_adapters"},
        {"lora.rank", std::to_string(config.rank)},
        {"lora.alpha", format_double(config.alpha)},
        {"lora.dropout", format_double(config.dropout)},
        {"lora.scaling", to_string(config.scaling)},
        {"lora.target_query", config.target_query ? "1" : "0"},
        {"lora.target_value", config.target_value ? "1" : "0"},
        {"lora.num_layers", std::to_string(adapters.size())},
    };
    const ParameterRegistry registry = adapter_registry(adapters);
    for (const auto& e : registry.entries()) {
        archive.add(e.name, e.var->value, false);
    }
    return archive;
}

LoRAConfig lora_config_from_metadata(const ArrayArchive& archive)
{
    LoRAConfig c;
    c.rank = std::stoul(archive.meta("lora.rank"));
    c.alpha = std::stod(archive.meta("lora.alpha"));
    c.dropout = std::stod(archive.meta("lora.dropout"));
    c.scaling = parse_lora_scaling(archive.meta("lora.scaling"));
    c.target_query = archive.meta("lora.target_query") == "1";
    c.target_value = archive.meta("lora.target_value") == "1";
    c.validate();
    return c;
}

AdapterSet adapters_from_archive(const ArrayArchive& archive, const EncoderWeights& weights)
{
    const LoRAConfig config = lora_config_from_metadata(archive);
    const std::size_t layers = std::stoul(archive.meta("lora.num_layers"));
    if (layers != weights.blocks.size()) {
        throw CompatibilityError("adapter checkpoint has " + std::to_string(layers) + " layers, backbone has " +
                                 std::to_string(weights.blocks.size()));
    }
    AdapterSet set(layers);
    for (std::size_t i = 0; i < layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        const BlockWeights& b = weights.blocks[i];
        if (config.target_query) {
            set[i].query.emplace(b.query_weight, b.query_bias, config, archive.get(p + "q.lora_A").tensor,
                                 archive.get(p + "q.lora_B").tensor);
        }
        if (config.target_value) {
            set[i].value.emplace(b.value_weight, b.value_bias, config, archive.get(p + "v.lora_A").tensor,
                                 archive.get(p + "v.lora_B").tensor);
        }
    }
    return set;
}

Tensor patch_matrix(const Tensor& image, const ViTConfig& c)
{
    if (image.shape() != c.image_shape()) {
        throw ShapeError("image " + shape_str(image.shape()) + " does not match config " + shape_str(c.image_shape()));
    }
    const std::size_t p = c.patch_size;
    const std::size_t g = c.grid();
    const std::size_t s = c.image_size;
    Tensor out({c.num_patches(), c.patch_dim()});
    const auto src = image.data();
    auto dst = out.data();
    std::size_t k = 0;
    for (std::size_t py = 0; py < g; ++py) {
        for (std::size_t px = 0; px < g; ++px) {
            for (std::size_t ch = 0; ch < c.channels; ++ch) {
                for (std::size_t dy = 0; dy < p; ++dy) {
                    for (std::size_t dx = 0; dx < p; ++dx) {
                        dst[k++] = src[(ch * s + py * p + dy) * s + px * p + dx];
                    }
                }
            }
        }
    }
    return out;
}

Var patchify(const Tensor& image, const EncoderWeights& w)
{
    const Var patches = linear(constant(patch_matrix(image, w.config)), w.patch_weight, w.patch_bias);
    return add(concat_rows(w.cls_token, patches), w.pos_embedding);
}

Var attention(const Var& tokens, const BlockWeights& block, const LayerAdapters* adapters, const ViTConfig& c,
              const ForwardContext& ctx)
{
    if (tokens->value.rank() != 2 || tokens->value.dim(1) != c.embed_dim) {
        throw ShapeError("attention expects [T x " + std::to_string(c.embed_dim) + "] tokens, got " +
                         shape_str(tokens->value.shape()));
    }
    const Var q = (adapters && adapters->query) ? adapters->query->forward(tokens, ctx)
                                                : linear(tokens, block.query_weight, block.query_bias);
    const Var k = linear(tokens, block.key_weight, block.key_bias);
    const Var v = (adapters && adapters->value) ? adapters->value->forward(tokens, ctx)
                                                : linear(tokens, block.value_weight, block.value_bias);
    const std::size_t hd = c.head_dim();
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Var> heads;
    heads.reserve(c.num_heads);
    for (std::size_t h = 0; h < c.num_heads; ++h) {
        const Var qh = slice_cols(q, h * hd, hd);
        const Var kh = slice_cols(k, h * hd, hd);
        const Var vh = slice_cols(v, h * hd, hd);
        const Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
        heads.push_back(matmul(weights, vh));
    }
    return linear(concat_cols(heads), block.out_weight, block.out_bias);
}

Var transformer_block(const Var& tokens, const BlockWeights& block, const LayerAdapters* adapters,
                      const ViTConfig& c, const ForwardContext& ctx)
{
    const Var attn_in = layer_norm(tokens, block.ln1_gain, block.ln1_bias, c.layer_norm_eps);
    const Var h = add(tokens, attention(attn_in, block, adapters, c, ctx));
    const Var mlp_in = layer_norm(h, block.ln2_gain, block.ln2_bias, c.layer_norm_eps);
    const Var hidden = gelu(linear(mlp_in, block.mlp_in_weight, block.mlp_in_bias));
    return add(h, linear(hidden, block.mlp_out_weight, block.mlp_out_bias));
}

Var encode(const Tensor& image, const EncoderWeights& w, const AdapterSet* adapters, const ForwardContext& ctx)
{
    if (adapters && adapters->size() != w.blocks.size()) {
        throw ConfigError("adapter set has " + std::to_string(adapters->size()) + " layers, encoder has " +
                          std::to_string(w.blocks.size()));
    }
    Var x = patchify(image, w);
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        x = transformer_block(x, w.blocks[i], adapters ? &(*adapters)[i] : nullptr, w.config, ctx);
    }
    const Var normed = layer_norm(x, w.final_gain, w.final_bias, w.config.layer_norm_eps);
    return row(normed, 0);
}

ParameterRegistry count_encoder_parameters(const ViTConfig& config)
{
    config.validate();
    ParameterRegistry reg;
    for (const auto& s : encoder_specs(config)) {
        reg.add_count(s.name, shape_numel(s.shape), false);
    }
    return reg;
}

ParameterRegistry count_adapter_parameters(const ViTConfig& config, const LoRAConfig& lora)
{
    lora.validate_for(config.embed_dim, config.embed_dim);
    ParameterRegistry reg;
    const std::size_t d = config.embed_dim;
    const std::size_t r = lora.rank;
    for (std::size_t i = 0; i < config.num_layers; ++i) {
        const std::string p = "blocks." + std::to_string(i) + ".";
        if (lora.target_query) {
            reg.add_count(p + "q.lora_A", r * d, true);
            reg.add_count(p + "q.lora_B", d * r, true);
        }
        if (lora.target_value) {
            reg.add_count(p + "v.lora_A", r * d, true);
            reg.add_count(p + "v.lora_B", d * r, true);
        }
    }
    return reg;
}

} // namespace dfmad
