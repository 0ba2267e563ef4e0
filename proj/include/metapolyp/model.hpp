#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "metapolyp/autodiff.hpp"
#include "metapolyp/blocks.hpp"
#include "metapolyp/keyvalue.hpp"

namespace metapolyp {

/// Architecture hyperparameters. Defaults are the full-size network; tiny()
/// is the desk-scale configuration used by tests and the CLI.
struct ModelConfig {
    std::size_t height = 256;
    std::size_t width = 256;
    std::array<std::size_t, 4> stage_channels{64, 128, 320, 512};
    std::array<std::size_t, 4> blocks_per_stage{2, 2, 2, 2};
    double mlp_ratio = 4.0;
    /// Attention heads in stages 3-4 and in the Convformer skip blocks.
    std::size_t heads = 8;
    /// Width of the two decoder steps above stage-1 resolution.
    std::size_t decoder_channels = 64;
    /// Transposed-conv kernel of each x2 decoder step (2 or 4).
    std::size_t upsample_kernel = 2;
    std::size_t mixer_kernel = 7;
    std::uint64_t seed = 0;

    static ModelConfig tiny(std::size_t hw = 64);

    /// Throws ConfigError naming the violated invariant.
    void validate() const;

    /// Flat `key = value` lines; round-trips through parse().
    std::string serialize() const;
    static ModelConfig parse(const std::string& text);
    /// Overwrites the named fields; unknown keys throw ConfigError. Does not validate.
    void apply(const KeyValues& entries);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class BlockKind { ConvFormer, Transformer };

/// Tape handles for every stage of one forward pass.
struct ForwardGraph {
    /// Pre-sigmoid head output, H x W x 1.
    Var logits;
    Var probabilities;
    std::array<Var, 4> encoder;
    std::array<Var, 6> decoder;
    /// multiscale[i] is the x4 decoding of decoder[i], merged into decoder[i + 2].
    std::array<Var, 4> multiscale;
};

/// Materialized results of an inference pass.
struct ModelOutput {
    /// H x W x 1, values in (0, 1).
    Tensor probabilities;
    std::array<Tensor, 4> encoder;
    std::array<Tensor, 6> decoder;
};

class Model {
   public:
    explicit Model(const ModelConfig& config);
    Model(Model&&) noexcept;
    Model& operator=(Model&&) noexcept;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;
    ~Model();

    const ModelConfig& config() const noexcept { return config_; }
    ParameterRegistry& parameters() noexcept { return registry_; }
    const ParameterRegistry& parameters() const noexcept { return registry_; }
    std::size_t parameter_count() const { return registry_.scalar_count(); }

    /// Kind of token mixer used by encoder stage `stage` (1-based).
    BlockKind stage_kind(std::size_t stage) const;

    /// Records a full forward pass; `image` must be H x W x 3.
    ForwardGraph forward(Tape& tape, Var image) const;
    /// Inference pass on its own tape.
    ModelOutput forward(const Tensor& image) const;

    /// Copies parameter values from a model of the same architecture (seeds may differ).
    void copy_parameters_from(const Model& other);

   private:
    struct Layers;

    ModelConfig config_;
    ParameterRegistry registry_;
    std::unique_ptr<Layers> layers_;
};

}  // namespace metapolyp
