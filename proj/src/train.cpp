#include "metapolyp/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "metapolyp/error.hpp"
#include "metapolyp/keyvalue.hpp"
#include "metapolyp/metrics.hpp"

namespace metapolyp {

namespace fs = std::filesystem;

double cosine_lr(std::uint64_t t, const ScheduleSpec& spec) {
    if (spec.total_steps == 0) throw ConfigError("cosine_lr: total_steps must be positive");
    if (t >= spec.total_steps) return spec.lr_min;
    const double frac = static_cast<double>(t) / static_cast<double>(spec.total_steps);
    return spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamState AdamState::for_parameters(const ParameterRegistry& params) {
    AdamState s;
    for (const auto* p : params.all()) {
        s.m.emplace_back(p->value.shape());
        s.v.emplace_back(p->value.shape());
    }
    return s;
}

void adam_step(ParameterRegistry& params, AdamState& state, double lr, const AdamConfig& cfg) {
    const auto all = params.all();
    if (state.m.size() != all.size() || state.v.size() != all.size()) {
        throw UsageError("adam_step: optimizer state does not match the parameter registry");
    }
    for (const auto* p : all) {
        if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter " + p->name);
    }
    const std::uint64_t t = state.t + 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < all.size(); ++i) {
        Parameter& p = *all[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        if (m.shape() != p.value.shape() || v.shape() != p.value.shape()) {
            throw UsageError("adam_step: moment shape mismatch for " + p.name);
        }
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            const double g = p.grad[j];
            const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            m[j] = static_cast<float>(mj);
            v[j] = static_cast<float>(vj);
            const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps);
            p.value[j] = static_cast<float>(p.value[j] - update);
        }
        p.zero_grad();
    }
    state.t = t;
}

void TrainConfig::validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(alpha > 0.0)) throw ConfigError("alpha must be positive");
    if (!(lr_max >= lr_min && lr_min >= 0.0)) throw ConfigError("learning rates need lr_max >= lr_min >= 0");
    if (checkpoint_every == 0 || validate_every == 0) throw ConfigError("cadences must be at least 1");
    if (!(threshold >= 0.0f && threshold <= 1.0f)) throw ConfigError("threshold must lie in [0, 1]");
    augment.validate();
}

namespace {

// Every TrainConfig field with a uniform text codec.
template <typename F>
void for_each_field(TrainConfig& c, F&& f) {
    f("epochs", c.epochs);
    f("batch_size", c.batch_size);
    f("alpha", c.alpha);
    f("lr_max", c.lr_max);
    f("lr_min", c.lr_min);
    f("seed", c.seed);
    f("checkpoint_every", c.checkpoint_every);
    f("validate_every", c.validate_every);
    f("threshold", c.threshold);
    auto& a = c.augment;
    f("augment.p_flip_h", a.p_flip_h);
    f("augment.p_flip_v", a.p_flip_v);
    f("augment.p_rotate", a.p_rotate);
    f("augment.p_center_crop", a.p_center_crop);
    f("augment.p_grid", a.p_grid);
    f("augment.p_cutout", a.p_cutout);
    f("augment.p_cutmix", a.p_cutmix);
    f("augment.rotate_max_deg", a.rotate_max_deg);
    f("augment.crop_min", a.crop_min);
    f("augment.crop_max", a.crop_max);
    f("augment.grid_cells", a.grid_cells);
    f("augment.grid_magnitude", a.grid_magnitude);
    f("augment.cutout_min_holes", a.cutout_min_holes);
    f("augment.cutout_max_holes", a.cutout_max_holes);
    f("augment.cutout_min_frac", a.cutout_min_frac);
    f("augment.cutout_max_frac", a.cutout_max_frac);
    f("augment.cutout_fill", a.cutout_fill);
    f("augment.cutmix_min_area", a.cutmix_min_area);
    f("augment.cutmix_max_area", a.cutmix_max_area);
}

template <typename T>
std::string to_text(const T& v) {
    if constexpr (std::is_floating_point_v<T>) {
        return format_double(static_cast<double>(v));
    } else {
        return std::to_string(v);
    }
}

template <typename T>
void from_text(const std::string& key, const std::string& text, T& out) {
    if constexpr (std::is_floating_point_v<T>) {
        out = static_cast<T>(parse_double(key, text));
    } else {
        out = static_cast<T>(parse_uint(key, text));
    }
}

}  // namespace

std::string TrainConfig::serialize() const {
    std::ostringstream os;
    auto copy = *this;
    for_each_field(copy, [&](const char* key, const auto& v) { os << key << " = " << to_text(v) << "\n"; });
    return os.str();
}

void TrainConfig::apply(const KeyValues& entries) {
    for (const auto& [key, val] : entries) {
        bool found = false;
        for_each_field(*this, [&](const char* k, auto& field) {
            if (key == k) {
                from_text(key, val, field);
                found = true;
            }
        });
        if (!found) throw ConfigError("unknown train config key: " + key);
    }
}

TrainConfig TrainConfig::parse(const std::string& text) {
    TrainConfig c;
    c.apply(parse_key_values(text, "train config"));
    c.validate();
    return c;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
    std::ostringstream os;
    os << "epoch,lr,train_loss,val_miou,val_mdice,val_mae\n";
    auto field = [](double v) { return std::isnan(v) ? std::string() : format_double(v); };
    for (const auto& r : rows) {
        os << r.epoch << ',' << format_double(r.lr) << ',' << format_double(r.train_loss) << ',' << field(r.val_miou)
           << ',' << field(r.val_mdice) << ',' << field(r.val_mae) << '\n';
    }
    return os.str();
}

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ull;

std::vector<HistoryRow> parse_history(const std::string& csv) {
    std::vector<HistoryRow> rows;
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);  // header
    auto num = [](const std::string& s) {
        return s.empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double("history", s);
    };
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (line.back() == ',') cells.emplace_back();
        if (cells.size() != 6) throw CheckpointError(CheckpointError::Kind::Malformed, "bad history row: " + line);
        rows.push_back({parse_uint("epoch", cells[0]), num(cells[1]), num(cells[2]), num(cells[3]), num(cells[4]),
                        num(cells[5])});
    }
    return rows;
}

}  // namespace

TrainState::TrainState(const ModelConfig& model_config, const TrainConfig& train_config)
    : model(model_config),
      config(train_config),
      adam(AdamState::for_parameters(model.parameters())),
      rng(Rng::derive(train_config.seed, kShuffleStream)) {
    config.validate();
}

Checkpoint to_checkpoint(const TrainState& s) {
    Checkpoint c;
    const auto params = s.model.parameters().all();
    for (std::size_t i = 0; i < params.size(); ++i) c.put("param/" + params[i]->name, params[i]->value);
    for (std::size_t i = 0; i < params.size(); ++i) c.put("adam.m/" + params[i]->name, s.adam.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) c.put("adam.v/" + params[i]->name, s.adam.v[i]);
    c.put_meta("model_config", s.model.config().serialize());
    c.put_meta("train_config", s.config.serialize());
    c.put_meta("adam.t", std::to_string(s.adam.t));
    c.put_meta("epoch", std::to_string(s.epoch));
    c.put_meta("step", std::to_string(s.step));
    c.put_meta("rng", s.rng.save_state());
    c.put_meta("best_val_dice", format_double(s.best_val_dice));
    c.put_meta("history", history_csv(s.history));
    return c;
}

TrainState from_checkpoint(const Checkpoint& c) {
    TrainState s(ModelConfig::parse(c.meta("model_config")), TrainConfig::parse(c.meta("train_config")));
    auto params = s.model.parameters().all();
    auto restore = [&](const std::string& prefix, Tensor& dst, const Parameter& p) {
        const Tensor& src = c.tensor(prefix + p.name);
        if (src.shape() != dst.shape()) {
            throw CheckpointError(CheckpointError::Kind::Malformed,
                                  "checkpoint tensor " + prefix + p.name + " has shape " + shape_str(src.shape()) +
                                      ", expected " + shape_str(dst.shape()));
        }
        dst = src;
    };
    for (std::size_t i = 0; i < params.size(); ++i) {
        restore("param/", params[i]->value, *params[i]);
        restore("adam.m/", s.adam.m[i], *params[i]);
        restore("adam.v/", s.adam.v[i], *params[i]);
    }
    if (c.tensors.size() != 3 * params.size()) {
        throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint holds tensors the model does not have");
    }
    try {
        s.adam.t = parse_uint("adam.t", c.meta("adam.t"));
        s.epoch = parse_uint("epoch", c.meta("epoch"));
        s.step = parse_uint("step", c.meta("step"));
        s.best_val_dice = parse_double("best_val_dice", c.meta("best_val_dice"));
        s.rng.load_state(c.meta("rng"));
    } catch (const ConfigError& e) {
        throw CheckpointError(CheckpointError::Kind::Malformed, std::string("checkpoint metadata: ") + e.what());
    }
    s.history = parse_history(c.meta("history"));
    return s;
}

Trainer::Trainer(TrainState& state, std::vector<Sample> train, std::vector<Sample> val, fs::path out_dir)
    : state_(state),
      train_(std::move(train)),
      val_(std::move(val)),
      out_(std::move(out_dir)),
      augmenter_(state.config.augment, state.config.seed) {
    if (train_.empty()) throw UsageError("train: the training set is empty");
    const auto& mc = state_.model.config();
    for (const auto* set : {&train_, &val_}) {
        for (const auto& s : *set) {
            validate_sample(s);
            if (s.image.dim(0) != mc.height || s.image.dim(1) != mc.width) {
                throw DimensionError("sample " + s.id + " is " + shape_str(s.image.shape()) + " but the model expects " +
                                     std::to_string(mc.height) + "x" + std::to_string(mc.width));
            }
        }
    }
    if (!out_.empty()) fs::create_directories(out_);
}

std::size_t Trainer::steps_per_epoch() const noexcept {
    return (train_.size() + state_.config.batch_size - 1) / state_.config.batch_size;
}

std::uint64_t Trainer::total_steps() const noexcept { return state_.config.epochs * steps_per_epoch(); }

HistoryRow Trainer::run_epoch() {
    if (done()) throw UsageError("train: all epochs already completed");
    const auto& cfg = state_.config;
    const ScheduleSpec schedule{cfg.lr_max, cfg.lr_min, total_steps()};
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    state_.rng.shuffle(order);

    HistoryRow row;
    row.epoch = state_.epoch + 1;
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
        const double lr = cosine_lr(state_.step, schedule);
        double loss_value = 0.0;
        try {
            Tape tape;
            std::vector<Var> preds;
            std::vector<Tensor> truths;
            for (std::size_t i = begin; i < end; ++i) {
                Sample s = augmenter_(train_, order[i], state_.epoch);
                preds.push_back(state_.model.forward(tape, tape.constant(std::move(s.image))).probabilities);
                truths.push_back(std::move(s.mask));
            }
            Var loss = jaccard_loss(preds, truths, cfg.alpha);
            loss_value = loss.value()[0];
            if (!std::isfinite(loss_value)) throw NumericError("loss is not finite");
            tape.backward(loss);
            adam_step(state_.model.parameters(), state_.adam, lr, {});
        } catch (const NumericError& e) {
            state_.model.parameters().zero_grad();
            throw NumericError("epoch " + std::to_string(state_.epoch + 1) + " step " + std::to_string(state_.step + 1) +
                               ": " + e.what());
        }
        ++state_.step;
        ++batches;
        loss_sum += loss_value;
        row.lr = lr;
        if (on_step) on_step({state_.epoch + 1, state_.step, lr, loss_value});
    }
    row.train_loss = loss_sum / static_cast<double>(batches);
    state_.epoch += 1;

    const bool last = done();
    const bool validated = !val_.empty() && (state_.epoch % cfg.validate_every == 0 || last);
    if (validated) {
        EvalReport report;
        try {
            report = evaluate(val_, state_.model, cfg.threshold);
        } catch (const NumericError& e) {
            throw NumericError("epoch " + std::to_string(state_.epoch) + " validation: " + e.what());
        }
        row.val_miou = report.mean_iou;
        row.val_mdice = report.mean_dice;
        row.val_mae = report.mean_mae;
    }
    state_.history.push_back(row);
    write_outputs(row, validated);
    if (on_epoch) on_epoch(row);
    return row;
}

void Trainer::run() {
    while (!done()) run_epoch();
}

void Trainer::write_outputs(const HistoryRow& row, bool validated) {
    const bool improved = validated && row.val_mdice > state_.best_val_dice;
    if (improved) state_.best_val_dice = row.val_mdice;
    if (out_.empty()) return;
    {
        std::ofstream os(out_ / "history.csv", std::ios::binary | std::ios::trunc);
        if (!os) throw Error("cannot write " + (out_ / "history.csv").string());
        os << history_csv(state_.history);
    }
    if (state_.epoch % state_.config.checkpoint_every == 0 || done()) {
        save_checkpoint(out_ / "last.ckpt", to_checkpoint(state_));
    }
    if (improved) save_checkpoint(out_ / "best.ckpt", to_checkpoint(state_));
}

Prediction predict(const Model& model, const Tensor& image, float threshold) {
    Prediction p;
    p.probabilities = model.forward(image).probabilities;
    p.mask = binarize(p.probabilities, threshold);
    return p;
}

}  // namespace metapolyp
