#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "metapolyp/augment.hpp"
#include "metapolyp/checkpoint.hpp"
#include "metapolyp/data.hpp"
#include "metapolyp/keyvalue.hpp"
#include "metapolyp/model.hpp"
#include "metapolyp/rng.hpp"

namespace metapolyp {

struct ScheduleSpec {
    double lr_max = 1e-4;
    double lr_min = 0.0;
    std::uint64_t total_steps = 1;
};

/// Half-cosine decay from lr_max at t = 0 to lr_min at t = total_steps;
/// later steps stay at lr_min.
double cosine_lr(std::uint64_t t, const ScheduleSpec& spec);

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment buffers in registry order, plus the number of steps taken.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::uint64_t t = 0;

    static AdamState for_parameters(const ParameterRegistry& params);
};

/// One bias-corrected Adam update from the accumulated Parameter::grad
/// values, which are zeroed afterwards. A non-finite gradient throws
/// NumericError naming the parameter, before anything is modified.
void adam_step(ParameterRegistry& params, AdamState& state, double lr, const AdamConfig& cfg = {});

struct TrainConfig {
    std::size_t epochs = 300;
    std::size_t batch_size = 4;
    double alpha = 0.7;
    double lr_max = 1e-4;
    double lr_min = 0.0;
    std::uint64_t seed = 0;
    /// Write last.ckpt every this many epochs (and after the final one).
    std::size_t checkpoint_every = 1;
    /// Run validation every this many epochs (and after the final one).
    std::size_t validate_every = 1;
    float threshold = 0.5f;
    AugmentConfig augment;

    void validate() const;
    /// Flat `key = value` lines; round-trips through parse().
    std::string serialize() const;
    static TrainConfig parse(const std::string& text);
    /// Overwrites the named fields; unknown keys throw ConfigError. Does not validate.
    void apply(const KeyValues& entries);
};

struct HistoryRow {
    std::uint64_t epoch = 0;
    /// Learning rate of the epoch's last step.
    double lr = 0.0;
    double train_loss = 0.0;
    /// NaN when validation did not run this epoch.
    double val_miou = std::numeric_limits<double>::quiet_NaN();
    double val_mdice = std::numeric_limits<double>::quiet_NaN();
    double val_mae = std::numeric_limits<double>::quiet_NaN();
};

/// Header plus one row per epoch; skipped validation leaves empty fields.
std::string history_csv(const std::vector<HistoryRow>& rows);

/// Everything needed to continue a run bit-exactly.
struct TrainState {
    TrainState(const ModelConfig& model_config, const TrainConfig& train_config);

    Model model;
    TrainConfig config;
    AdamState adam;
    /// Completed epochs and optimizer steps.
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    /// Drives the per-epoch shuffle.
    Rng rng;
    double best_val_dice = -1.0;
    std::vector<HistoryRow> history;
};

Checkpoint to_checkpoint(const TrainState& state);
/// Throws CheckpointError(Malformed) when entries are missing or mis-shaped.
TrainState from_checkpoint(const Checkpoint& ckpt);

struct StepInfo {
    std::uint64_t epoch = 0;
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

class Trainer {
   public:
    /// `out_dir` empty disables file output. The state is updated in place.
    Trainer(TrainState& state, std::vector<Sample> train, std::vector<Sample> val = {},
            std::filesystem::path out_dir = {});

    std::size_t steps_per_epoch() const noexcept;
    std::uint64_t total_steps() const noexcept;
    bool done() const noexcept { return state_.epoch >= state_.config.epochs; }

    HistoryRow run_epoch();
    /// Runs the remaining epochs.
    void run();

    std::function<void(const StepInfo&)> on_step;
    std::function<void(const HistoryRow&)> on_epoch;

   private:
    void write_outputs(const HistoryRow& row, bool validated);

    TrainState& state_;
    std::vector<Sample> train_;
    std::vector<Sample> val_;
    std::filesystem::path out_;
    Augmenter augmenter_;
};

struct Prediction {
    Tensor probabilities;
    /// 1 where probability >= threshold.
    Tensor mask;
};

Prediction predict(const Model& model, const Tensor& image, float threshold = 0.5f);

}  // namespace metapolyp
