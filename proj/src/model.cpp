#include "metapolyp/model.hpp"

#include <charconv>
#include <cstdio>
#include <optional>
#include <sstream>

#include "metapolyp/error.hpp"
#include "metapolyp/keyvalue.hpp"

namespace metapolyp {

ModelConfig ModelConfig::tiny(std::size_t hw) {
    ModelConfig c;
    c.height = hw;
    c.width = hw;
    c.stage_channels = {8, 16, 24, 32};
    c.blocks_per_stage = {1, 1, 1, 1};
    c.mlp_ratio = 2.0;
    c.heads = 2;
    c.decoder_channels = 8;
    return c;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
    if (height == 0 || width == 0 || height % 32 != 0 || width % 32 != 0) {
        fail("input extents " + std::to_string(height) + "x" + std::to_string(width) + " must be positive multiples of 32");
    }
    for (std::size_t i = 0; i < 4; ++i) {
        if (stage_channels[i] == 0) fail("stage_channels[" + std::to_string(i) + "] must be positive");
        if (blocks_per_stage[i] == 0) fail("blocks_per_stage[" + std::to_string(i) + "] must be positive");
        if (heads == 0 || stage_channels[i] % heads != 0) {
            fail("stage_channels[" + std::to_string(i) + "] = " + std::to_string(stage_channels[i]) +
                 " not divisible by heads = " + std::to_string(heads));
        }
        BlockConfig{stage_channels[i], mlp_ratio, heads, mixer_kernel}.validate(true);
    }
    if (decoder_channels == 0) fail("decoder_channels must be positive");
    if (upsample_kernel != 2 && upsample_kernel != 4) fail("upsample_kernel must be 2 or 4");
}

namespace {

std::string join(const std::array<std::size_t, 4>& v) {
    return std::to_string(v[0]) + "," + std::to_string(v[1]) + "," + std::to_string(v[2]) + "," + std::to_string(v[3]);
}

std::array<std::size_t, 4> parse_quad(const std::string& key, const std::string& v) {
    std::array<std::size_t, 4> out{};
    std::stringstream ss(v);
    std::string item;
    std::size_t i = 0;
    while (std::getline(ss, item, ',')) {
        if (i == 4) throw ConfigError(key + " needs exactly 4 values");
        out[i++] = parse_uint(key, trim(item));
    }
    if (i != 4) throw ConfigError(key + " needs exactly 4 values");
    return out;
}

}  // namespace

std::string ModelConfig::serialize() const {
    std::ostringstream os;
    os << "height = " << height << "\n"
       << "width = " << width << "\n"
       << "stage_channels = " << join(stage_channels) << "\n"
       << "blocks_per_stage = " << join(blocks_per_stage) << "\n"
       << "mlp_ratio = " << format_double(mlp_ratio) << "\n"
       << "heads = " << heads << "\n"
       << "decoder_channels = " << decoder_channels << "\n"
       << "upsample_kernel = " << upsample_kernel << "\n"
       << "mixer_kernel = " << mixer_kernel << "\n"
       << "seed = " << seed << "\n";
    return os.str();
}

void ModelConfig::apply(const KeyValues& entries) {
    ModelConfig& c = *this;
    for (const auto& [key, val] : entries) {
        if (key == "height") c.height = parse_uint(key, val);
        else if (key == "width") c.width = parse_uint(key, val);
        else if (key == "stage_channels") c.stage_channels = parse_quad(key, val);
        else if (key == "blocks_per_stage") c.blocks_per_stage = parse_quad(key, val);
        else if (key == "mlp_ratio") c.mlp_ratio = parse_double(key, val);
        else if (key == "heads") c.heads = parse_uint(key, val);
        else if (key == "decoder_channels") c.decoder_channels = parse_uint(key, val);
        else if (key == "upsample_kernel") c.upsample_kernel = parse_uint(key, val);
        else if (key == "mixer_kernel") c.mixer_kernel = parse_uint(key, val);
        else if (key == "seed") c.seed = parse_uint(key, val);
        else throw ConfigError("unknown model config key: " + key);
    }
}

ModelConfig ModelConfig::parse(const std::string& text) {
    ModelConfig c;
    c.apply(parse_key_values(text, "model config"));
    c.validate();
    return c;
}

struct Model::Layers {
    std::optional<Stem> stem;
    std::vector<std::optional<Downsample>> downs;  // downs[i] feeds stage i + 2
    std::array<std::vector<ConvFormerEncoderBlock>, 2> conv_stages;
    std::array<std::vector<TransformerEncoderBlock>, 2> attn_stages;

    std::vector<TransposedConv2d> ups;  // five x2 steps, D0 -> D5
    std::optional<ConvformerBlock> skip1, skip2;
    std::array<Conv2d, 3> proj;         // projections of E1, E2, E3 skips
    std::vector<MultiscaleUpsampleBlock> multiscale;
    Conv2d head;
};

Model::Model(const ModelConfig& config) : config_(config), layers_(std::make_unique<Layers>()) {
    config_.validate();
    Rng rng(config_.seed);
    auto& L = *layers_;
    const auto& ch = config_.stage_channels;

    L.stem.emplace(registry_, rng, "encoder.stem", 3, ch[0]);
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) L.downs.emplace_back(std::in_place, registry_, rng, "encoder.down" + std::to_string(s + 1), ch[s - 1], ch[s]);
        BlockConfig bc{ch[s], config_.mlp_ratio, config_.heads, config_.mixer_kernel};
        for (std::size_t b = 0; b < config_.blocks_per_stage[s]; ++b) {
            const std::string name = "encoder.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
            if (s < 2) L.conv_stages[s].emplace_back(registry_, rng, name, bc);
            else L.attn_stages[s - 2].emplace_back(registry_, rng, name, bc);
        }
    }

    const std::size_t dc = config_.decoder_channels;
    // Channels of D0..D5.
    const std::array<std::size_t, 6> dch{ch[3], ch[2], ch[1], ch[0], dc, dc};
    for (std::size_t i = 0; i < 5; ++i) {
        L.ups.emplace_back(registry_, rng, "decoder.up" + std::to_string(i + 1), config_.upsample_kernel, dch[i], dch[i + 1]);
    }
    L.skip1.emplace(registry_, rng, "decoder.skip1.convformer", BlockConfig{ch[0], config_.mlp_ratio, config_.heads, config_.mixer_kernel});
    L.skip2.emplace(registry_, rng, "decoder.skip2.convformer", BlockConfig{ch[1], config_.mlp_ratio, config_.heads, config_.mixer_kernel});
    for (std::size_t i = 0; i < 3; ++i) {
        L.proj[i] = Conv2d(registry_, rng, "decoder.skip" + std::to_string(i + 1) + ".proj", 1, ch[i], dch[3 - i]);
    }
    for (std::size_t i = 0; i < 4; ++i) {
        L.multiscale.emplace_back(registry_, rng, "decoder.multiscale" + std::to_string(i), dch[i], dch[i + 2]);
    }
    L.head = Conv2d(registry_, rng, "head", 1, dc, 1);
}

Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

BlockKind Model::stage_kind(std::size_t stage) const {
    if (stage < 1 || stage > 4) throw UsageError("stage index must be in 1..4");
    return stage <= 2 ? BlockKind::ConvFormer : BlockKind::Transformer;
}

ForwardGraph Model::forward(Tape& t, Var image) const {
    const Shape expect{config_.height, config_.width, 3};
    if (image.shape() != expect) {
        throw DimensionError("model input " + shape_str(image.shape()) + " does not match configured " + shape_str(expect));
    }
    const auto& L = *layers_;
    ForwardGraph g;

    Var x = (*L.stem)(t, image);
    for (std::size_t s = 0; s < 4; ++s) {
        if (s > 0) x = (*L.downs[s - 1])(t, x);
        if (s < 2) {
            for (const auto& b : L.conv_stages[s]) x = b(t, x);
        } else {
            for (const auto& b : L.attn_stages[s - 2]) x = b(t, x);
        }
        g.encoder[s] = x;
    }

    auto fuse = [&](Var up, Var skip, std::size_t level) { return ops::gelu(ops::add(up, L.proj[level](t, skip))); };

    auto& d = g.decoder;
    auto& ms = g.multiscale;
    d[0] = g.encoder[3];
    d[1] = fuse(L.ups[0](t, d[0]), g.encoder[2], 2);
    ms[0] = L.multiscale[0](t, d[0]);
    d[2] = levelup_merge(fuse(L.ups[1](t, d[1]), (*L.skip2)(t, g.encoder[1]), 1), ms[0]);
    ms[1] = L.multiscale[1](t, d[1]);
    d[3] = levelup_merge(fuse(L.ups[2](t, d[2]), (*L.skip1)(t, g.encoder[0]), 0), ms[1]);
    ms[2] = L.multiscale[2](t, d[2]);
    d[4] = levelup_merge(L.ups[3](t, d[3]), ms[2]);
    ms[3] = L.multiscale[3](t, d[3]);
    d[5] = levelup_merge(L.ups[4](t, d[4]), ms[3]);
    g.logits = L.head(t, d[5]);
    g.probabilities = ops::sigmoid(g.logits);
    return g;
}

ModelOutput Model::forward(const Tensor& image) const {
    Tape t(Tape::Mode::Inference);
    auto g = forward(t, t.constant(image));
    ModelOutput out;
    out.probabilities = g.probabilities.value();
    for (std::size_t i = 0; i < 4; ++i) out.encoder[i] = g.encoder[i].value();
    for (std::size_t i = 0; i < 6; ++i) out.decoder[i] = g.decoder[i].value();
    return out;
}

void Model::copy_parameters_from(const Model& other) {
    auto arch = other.config_;
    arch.seed = config_.seed;
    if (!(arch == config_)) throw ConfigError("copy_parameters_from: architecture mismatch");
    auto dst = registry_.all();
    auto src = other.registry_.all();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
}

}  // namespace metapolyp
