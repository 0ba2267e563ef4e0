#include "metapolyp/blocks.hpp"

#include <cmath>

#include "metapolyp/error.hpp"

namespace metapolyp {

std::size_t BlockConfig::hidden() const {
    return static_cast<std::size_t>(std::llround(static_cast<double>(channels) * mlp_ratio));
}

void BlockConfig::validate(bool attention) const {
    if (channels == 0) throw ConfigError("block channels must be positive");
    const double h = static_cast<double>(channels) * mlp_ratio;
    if (!(mlp_ratio > 0.0) || h < 1.0 || std::fabs(h - std::round(h)) > 1e-9) {
        throw ConfigError("channels * mlp_ratio must be a positive integer, got " + std::to_string(h));
    }
    if (kernel % 2 == 0) throw ConfigError("block kernel must be odd, got " + std::to_string(kernel));
    if (attention) {
        if (heads == 0 || channels % heads != 0) {
            throw ConfigError("channels (" + std::to_string(channels) + ") not divisible by heads (" +
                              std::to_string(heads) + ")");
        }
    }
}

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.uniform(-bound, bound));
    return t;
}

namespace {
void require_channels(Var x, std::size_t channels, const std::string& who) {
    const auto& s = x.shape();
    if (s.size() != 3 || s[2] != channels) {
        throw DimensionError(who + ": expected H x W x " + std::to_string(channels) + " input, got " + shape_str(s));
    }
}
}  // namespace

LayerNorm::LayerNorm(ParameterRegistry& reg, const std::string& name, std::size_t channels)
    : gamma(&reg.create(name + ".gamma", Tensor({channels}, 1.0f))),
      beta(&reg.create(name + ".beta", Tensor({channels}, 0.0f))) {}

Var LayerNorm::operator()(Tape& t, Var x) const { return ops::layer_norm(x, t.param(*gamma), t.param(*beta), 1e-6f); }

Conv2d::Conv2d(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t kernel, std::size_t cin,
               std::size_t cout, std::size_t stride, bool with_bias)
    : weight(&reg.create(name + ".weight", he_uniform({kernel, kernel, cin, cout}, kernel * kernel * cin, rng))),
      bias(with_bias ? &reg.create(name + ".bias", Tensor({cout}, 0.0f)) : nullptr),
      stride(stride) {}

Var Conv2d::operator()(Tape& t, Var x) const {
    Var y = ops::conv2d(x, t.param(*weight), stride, ops::Padding::Same);
    return bias ? ops::add_bias(y, t.param(*bias)) : y;
}

TransposedConv2d::TransposedConv2d(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t kernel,
                                   std::size_t cin, std::size_t cout)
    : weight(&reg.create(name + ".weight", he_uniform({kernel, kernel, cout, cin}, kernel * kernel * cin / 4, rng))),
      bias(&reg.create(name + ".bias", Tensor({cout}, 0.0f))) {
    if (kernel != 2 && kernel != 4) throw ConfigError("transposed conv kernel must be 2 or 4");
}

Var TransposedConv2d::operator()(Tape& t, Var x) const {
    return ops::add_bias(ops::transposed_conv2d(x, t.param(*weight), 2), t.param(*bias));
}

ChannelMlp::ChannelMlp(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t channels,
                       std::size_t hidden)
    : w1(&reg.create(name + ".w1", he_uniform({channels, hidden}, channels, rng))),
      w2(&reg.create(name + ".w2", he_uniform({hidden, channels}, hidden, rng))) {}

Var ChannelMlp::operator()(Tape& t, Var x) const {
    const Shape shape = x.shape();
    const std::size_t c = shape.back();
    Var tokens = ops::reshape(x, {x.value().size() / c, c});
    Var h = ops::gelu(ops::matmul(tokens, t.param(*w1)));
    return ops::reshape(ops::matmul(h, t.param(*w2)), shape);
}

SelfAttention::SelfAttention(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t channels,
                             std::size_t heads)
    : wq(&reg.create(name + ".wq", he_uniform({channels, channels}, channels, rng))),
      wk(&reg.create(name + ".wk", he_uniform({channels, channels}, channels, rng))),
      wv(&reg.create(name + ".wv", he_uniform({channels, channels}, channels, rng))),
      wo(&reg.create(name + ".wo", he_uniform({channels, channels}, channels, rng))),
      bo(&reg.create(name + ".bo", Tensor({channels}, 0.0f))),
      heads(heads) {
    if (heads == 0 || channels % heads != 0) {
        throw ConfigError(name + ": channels (" + std::to_string(channels) + ") not divisible by heads (" +
                          std::to_string(heads) + ")");
    }
}

Var SelfAttention::operator()(Tape& t, Var x, AttentionWeights* keep) const {
    const Shape shape = x.shape();
    const std::size_t c = wq->value.dim(0);
    require_channels(x, c, "self-attention");
    const std::size_t d = c / heads;
    const float scale = 1.0f / std::sqrt(static_cast<float>(d));

    Var tokens = ops::reshape(x, {shape[0] * shape[1], c});
    Var q = ops::matmul(tokens, t.param(*wq));
    Var k = ops::matmul(tokens, t.param(*wk));
    Var v = ops::matmul(tokens, t.param(*wv));
    if (keep) keep->masks.clear();
    std::vector<Var> per_head;
    per_head.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Var mask = ops::attention_mask(ops::slice_cols(q, h * d, d), ops::slice_cols(k, h * d, d), scale);
        if (keep) keep->masks.push_back(mask.value());
        per_head.push_back(ops::matmul(mask, ops::slice_cols(v, h * d, d)));
    }
    Var merged = heads == 1 ? per_head.front() : ops::concat_cols(per_head);
    Var out = ops::add_bias(ops::matmul(merged, t.param(*wo)), t.param(*bo));
    return ops::reshape(out, shape);
}

ConvFormerEncoderBlock::ConvFormerEncoderBlock(ParameterRegistry& reg, Rng& rng, const std::string& name,
                                               const BlockConfig& cfg)
    : cfg_(cfg) {
    cfg.validate(false);
    const std::size_t c = cfg.channels;
    norm1 = LayerNorm(reg, name + ".norm1", c);
    pw1 = Conv2d(reg, rng, name + ".mixer.pw1", 1, c, c, 1, false);
    dw = &reg.create(name + ".mixer.dw", he_uniform({cfg.kernel, cfg.kernel, c}, cfg.kernel * cfg.kernel, rng));
    pw2 = Conv2d(reg, rng, name + ".mixer.pw2", 1, c, c, 1, false);
    norm2 = LayerNorm(reg, name + ".norm2", c);
    mlp = ChannelMlp(reg, rng, name + ".mlp", c, cfg.hidden());
}

Var ConvFormerEncoderBlock::operator()(Tape& t, Var x) const {
    require_channels(x, cfg_.channels, "convformer encoder block");
    Var mixed = pw2(t, ops::depthwise_conv2d(ops::gelu(pw1(t, norm1(t, x))), t.param(*dw)));
    Var x1 = ops::add(x, mixed);
    return ops::add(x1, mlp(t, norm2(t, x1)));
}

TransformerEncoderBlock::TransformerEncoderBlock(ParameterRegistry& reg, Rng& rng, const std::string& name,
                                                 const BlockConfig& cfg)
    : cfg_(cfg) {
    cfg.validate(true);
    const std::size_t c = cfg.channels;
    norm1 = LayerNorm(reg, name + ".norm1", c);
    attention = SelfAttention(reg, rng, name + ".attn", c, cfg.heads);
    norm2 = LayerNorm(reg, name + ".norm2", c);
    mlp = ChannelMlp(reg, rng, name + ".mlp", c, cfg.hidden());
}

Var TransformerEncoderBlock::operator()(Tape& t, Var x, AttentionWeights* keep) const {
    require_channels(x, cfg_.channels, "transformer encoder block");
    Var x1 = ops::add(x, attention(t, norm1(t, x), keep));
    return ops::add(x1, mlp(t, norm2(t, x1)));
}

ConvformerBlock::ConvformerBlock(ParameterRegistry& reg, Rng& rng, const std::string& name, const BlockConfig& cfg)
    : cfg_(cfg) {
    cfg.validate(true);
    const std::size_t c = cfg.channels;
    pointwise = Conv2d(reg, rng, name + ".local", 1, c, c, 1, false);
    attention = SelfAttention(reg, rng, name + ".attn", c, cfg.heads);
    norm = LayerNorm(reg, name + ".norm", c);
    mlp = ChannelMlp(reg, rng, name + ".mlp", c, cfg.hidden());
}

Var ConvformerBlock::operator()(Tape& t, Var x, AttentionWeights* keep) const {
    require_channels(x, cfg_.channels, "convformer block");
    Var fused = ops::add(pointwise(t, x), attention(t, x, keep));
    return ops::add(fused, mlp(t, norm(t, fused)));
}

MultiscaleUpsampleBlock::MultiscaleUpsampleBlock(ParameterRegistry& reg, Rng& rng, const std::string& name,
                                                 std::size_t cin, std::size_t cout, std::size_t kernel)
    : conv(reg, rng, name + ".conv", kernel, cin, cout, 1, true) {}

Var MultiscaleUpsampleBlock::operator()(Tape& t, Var x) const { return conv(t, ops::upsample(x, 4)); }

Var levelup_merge(Var target, Var decoded) {
    if (target.shape() != decoded.shape()) {
        throw DimensionError("levelup_merge: target " + shape_str(target.shape()) + " vs decoded " +
                             shape_str(decoded.shape()));
    }
    return ops::gelu(ops::add(target, decoded));
}

Stem::Stem(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout)
    : conv(reg, rng, name + ".conv", 7, cin, cout, 4, true), norm(reg, name + ".norm", cout) {}

Var Stem::operator()(Tape& t, Var x) const {
    const auto& s = x.shape();
    if (s.size() != 3 || s[2] != conv.weight->value.dim(2)) {
        throw DimensionError("stem: unexpected input " + shape_str(s));
    }
    if (s[0] % 4 != 0 || s[1] % 4 != 0) {
        throw ConfigError("stem: input extents " + shape_str(s) + " must be divisible by 4");
    }
    return norm(t, conv(t, x));
}

Downsample::Downsample(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout)
    : conv(reg, rng, name + ".conv", 3, cin, cout, 2, true), norm(reg, name + ".norm", cout) {}

Var Downsample::operator()(Tape& t, Var x) const {
    const auto& s = x.shape();
    require_channels(x, conv.weight->value.dim(2), "downsample");
    if (s[0] % 2 != 0 || s[1] % 2 != 0) {
        throw ConfigError("downsample: input extents " + shape_str(s) + " must be even");
    }
    return norm(t, conv(t, x));
}

}  // namespace metapolyp
