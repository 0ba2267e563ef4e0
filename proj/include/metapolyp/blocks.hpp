#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "metapolyp/autodiff.hpp"
#include "metapolyp/ops.hpp"
#include "metapolyp/rng.hpp"

namespace metapolyp {

struct BlockConfig {
    std::size_t channels = 64;
    /// Hidden width of the channel MLP is channels * mlp_ratio.
    double mlp_ratio = 4.0;
    std::size_t heads = 1;
    /// Depthwise kernel of the ConvFormer token mixer.
    std::size_t kernel = 7;

    std::size_t hidden() const;
    /// Throws ConfigError on a violated invariant; heads are checked only
    /// for attention blocks.
    void validate(bool attention) const;
};

/// He-uniform initialization, bound sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);

// Layers. Each holds non-owning pointers into a ParameterRegistry.

struct LayerNorm {
    LayerNorm() = default;
    LayerNorm(ParameterRegistry& reg, const std::string& name, std::size_t channels);
    Var operator()(Tape& t, Var x) const;

    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
};

struct Conv2d {
    Conv2d() = default;
    Conv2d(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t kernel, std::size_t cin,
           std::size_t cout, std::size_t stride = 1, bool bias = true);
    Var operator()(Tape& t, Var x) const;

    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
    std::size_t stride = 1;
};

struct TransposedConv2d {
    TransposedConv2d() = default;
    TransposedConv2d(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t kernel, std::size_t cin,
                     std::size_t cout);
    Var operator()(Tape& t, Var x) const;

    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
};

/// sigma(x W1) W2 applied at every position; no biases.
struct ChannelMlp {
    ChannelMlp() = default;
    ChannelMlp(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t channels, std::size_t hidden);
    Var operator()(Tape& t, Var x) const;

    Parameter* w1 = nullptr;
    Parameter* w2 = nullptr;
};

/// Per-head attention masks retained from the last forward that asked for them.
struct AttentionWeights {
    /// One [tokens x tokens] row-stochastic matrix per head.
    std::vector<Tensor> masks;
};

/// Multi-head scaled dot-product self-attention over the H*W positions of an
/// H x W x C map. No positional encoding.
struct SelfAttention {
    SelfAttention() = default;
    SelfAttention(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t channels, std::size_t heads);
    Var operator()(Tape& t, Var x, AttentionWeights* keep = nullptr) const;

    Parameter* wq = nullptr;
    Parameter* wk = nullptr;
    Parameter* wv = nullptr;
    Parameter* wo = nullptr;
    Parameter* bo = nullptr;
    std::size_t heads = 1;
};

// Blocks.

/// x' = x + pw2(dw(sigma(pw1(Norm(x))))); x'' = x' + MLP(Norm(x')).
class ConvFormerEncoderBlock {
   public:
    ConvFormerEncoderBlock(ParameterRegistry& reg, Rng& rng, const std::string& name, const BlockConfig& cfg);
    Var operator()(Tape& t, Var x) const;

    const BlockConfig& config() const noexcept { return cfg_; }

    LayerNorm norm1;
    Conv2d pw1;
    Parameter* dw = nullptr;
    Conv2d pw2;
    LayerNorm norm2;
    ChannelMlp mlp;

   private:
    BlockConfig cfg_;
};

/// x' = x + SelfAttention(Norm(x)); x'' = x' + MLP(Norm(x')).
class TransformerEncoderBlock {
   public:
    TransformerEncoderBlock(ParameterRegistry& reg, Rng& rng, const std::string& name, const BlockConfig& cfg);
    Var operator()(Tape& t, Var x, AttentionWeights* keep = nullptr) const;

    const BlockConfig& config() const noexcept { return cfg_; }

    LayerNorm norm1;
    SelfAttention attention;
    LayerNorm norm2;
    ChannelMlp mlp;

   private:
    BlockConfig cfg_;
};

/// Local pointwise path plus self-attention, then a channel-MLP residual:
/// f = pw(x) + SelfAttention(x); out = f + MLP(Norm(f)).
class ConvformerBlock {
   public:
    ConvformerBlock(ParameterRegistry& reg, Rng& rng, const std::string& name, const BlockConfig& cfg);
    Var operator()(Tape& t, Var x, AttentionWeights* keep = nullptr) const;

    const BlockConfig& config() const noexcept { return cfg_; }

    Conv2d pointwise;
    SelfAttention attention;
    LayerNorm norm;
    ChannelMlp mlp;

   private:
    BlockConfig cfg_;
};

/// conv(upsample(x, 4)): h x w x Cin -> 4h x 4w x Cout.
class MultiscaleUpsampleBlock {
   public:
    MultiscaleUpsampleBlock(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t cin,
                            std::size_t cout, std::size_t kernel = 3);
    Var operator()(Tape& t, Var x) const;

    Conv2d conv;
};

/// sigma(target + decoded) with sigma = GELU.
Var levelup_merge(Var target, Var decoded);

/// 7x7 stride-4 conv + Norm: H x W x 3 -> H/4 x W/4 x C.
class Stem {
   public:
    Stem(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout);
    Var operator()(Tape& t, Var x) const;

    Conv2d conv;
    LayerNorm norm;
};

/// 3x3 stride-2 conv + Norm: h x w x Ci -> h/2 x w/2 x Cj.
class Downsample {
   public:
    Downsample(ParameterRegistry& reg, Rng& rng, const std::string& name, std::size_t cin, std::size_t cout);
    Var operator()(Tape& t, Var x) const;

    Conv2d conv;
    LayerNorm norm;
};

}  // namespace metapolyp
