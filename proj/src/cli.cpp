#include "metapolyp/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "metapolyp/checkpoint.hpp"
#include "metapolyp/data.hpp"
#include "metapolyp/error.hpp"
#include "metapolyp/gradsuite.hpp"
#include "metapolyp/keyvalue.hpp"
#include "metapolyp/metrics.hpp"
#include "metapolyp/model.hpp"
#include "metapolyp/netpbm.hpp"
#include "metapolyp/train.hpp"

namespace metapolyp {

namespace {

namespace fs = std::filesystem;

/// Stream for synthetic datasets, shared by `synth` and `--synthetic`.
constexpr std::uint64_t kSynthStream = 0x73796e7468;  // "synth"
constexpr std::size_t kDefaultSize = 64;

/// Overrides collected from flags. Values stay textual and go through the
/// same strict key/value parsers as the config file.
struct ConfigFlags {
    std::string config_file;
    std::optional<std::string> seed, size, channels, blocks, epochs, batch, lr, alpha, threshold;
};

struct DataFlags {
    std::optional<std::string> data, masks;
    std::optional<std::size_t> synthetic;
};

struct Resolved {
    ModelConfig model;
    TrainConfig train;
};

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot read " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void apply_entries(Resolved& r, const KeyValues& entries) {
    KeyValues model, train;
    for (const auto& [key, value] : entries) {
        if (key == "model.seed") throw ConfigError("model.seed is not configurable; the model uses 'seed'");
        if (key.rfind("model.", 0) == 0) {
            model.emplace_back(key.substr(6), value);
        } else {
            train.emplace_back(key, value);
        }
    }
    r.model.apply(model);
    r.train.apply(train);
}

/// defaults < METAPOLYP_SEED < config file < flags.
Resolved resolve(const ConfigFlags& f) {
    Resolved r{ModelConfig::tiny(kDefaultSize), TrainConfig{}};
    if (const char* env = std::getenv("METAPOLYP_SEED"); env != nullptr && *env != '\0') {
        r.train.seed = parse_uint("METAPOLYP_SEED", env);
    }
    if (!f.config_file.empty()) apply_entries(r, parse_key_values(read_text(f.config_file), f.config_file));

    KeyValues flags;
    auto add = [&](const char* key, const std::optional<std::string>& v) {
        if (v) flags.emplace_back(key, *v);
    };
    add("seed", f.seed);
    add("model.height", f.size);
    add("model.width", f.size);
    add("model.stage_channels", f.channels);
    add("model.blocks_per_stage", f.blocks);
    add("epochs", f.epochs);
    add("batch_size", f.batch);
    add("lr_max", f.lr);
    add("alpha", f.alpha);
    add("threshold", f.threshold);
    apply_entries(r, flags);

    r.model.seed = r.train.seed;
    r.model.validate();
    r.train.validate();
    return r;
}

/// Config-file text for the resolved settings; loadable through --config.
std::string describe(const Resolved& r) {
    std::ostringstream os;
    std::istringstream model(r.model.serialize());
    for (std::string line; std::getline(model, line);) {
        if (line.rfind("seed", 0) == 0) continue;
        os << "model." << line << "\n";
    }
    os << r.train.serialize();
    return os.str();
}

void echo(std::ostream& out, const std::string& command, const std::string& body) {
    out << "# " << command << " resolved configuration\n" << body << "# end configuration\n";
}

void add_config_flags(CLI::App& app, ConfigFlags& f, bool training) {
    app.add_option("--config", f.config_file, "Flat 'key = value' file; flags override it")->type_name("FILE");
    app.add_option("--seed", f.seed, "Seed for everything random (env METAPOLYP_SEED as fallback)")->type_name("N");
    app.add_option("--size", f.size, "Square input extent, a multiple of 32")->type_name("N");
    app.add_option("--channels", f.channels, "Encoder stage channels, e.g. 8,16,24,32")->type_name("C1,C2,C3,C4");
    app.add_option("--blocks", f.blocks, "Blocks per encoder stage, e.g. 1,1,1,1")->type_name("B1,B2,B3,B4");
    app.add_option("--threshold", f.threshold, "Binarization threshold")->type_name("P");
    if (training) {
        app.add_option("--epochs", f.epochs)->type_name("N");
        app.add_option("--batch", f.batch)->type_name("N");
        app.add_option("--lr", f.lr, "Peak learning rate of the cosine schedule")->type_name("LR");
        app.add_option("--alpha", f.alpha, "Jaccard loss smoothing")->type_name("A");
    }
}

void add_data_flags(CLI::App& app, DataFlags& d) {
    app.add_option("--data", d.data, "Dataset root with images/ and masks/, or the image directory with --masks")
        ->type_name("DIR");
    app.add_option("--masks", d.masks, "Mask directory when --data names the image directory")->type_name("DIR");
    app.add_option("--synthetic", d.synthetic, "Generate N synthetic samples instead of reading files")
        ->type_name("N");
}

std::vector<Sample> synthetic_samples(std::uint64_t seed, std::size_t size, std::size_t n) {
    Rng rng = Rng::derive(seed, kSynthStream);
    return synth_polyp(rng, size, n);
}

void require_source(const DataFlags& d, const std::string& command) {
    if (d.synthetic && d.data) throw UsageError(command + ": --data and --synthetic are mutually exclusive");
    if (d.masks && !d.data) throw UsageError(command + ": --masks needs --data");
    if (!d.synthetic && !d.data) throw UsageError(command + ": no data source; pass --data DIR or --synthetic N");
}

std::vector<Sample> load_samples(const DataFlags& d, std::uint64_t seed, std::size_t height, std::size_t width,
                                 const std::string& command) {
    require_source(d, command);
    if (d.synthetic) {
        if (*d.synthetic == 0) throw UsageError(command + ": --synthetic needs at least one sample");
        if (height != width) throw UsageError(command + ": synthetic data is square");
        return synthetic_samples(seed, height, *d.synthetic);
    }
    const fs::path root(*d.data);
    const fs::path images = d.masks ? root : root / "images";
    const fs::path masks = d.masks ? fs::path(*d.masks) : root / "masks";
    auto samples = load_dataset(images, masks, height, width);
    if (samples.empty()) throw UsageError(command + ": no samples under " + images.string());
    return samples;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw UsageError("cannot write " + path.string());
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

std::string sci(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return buf;
}

// ---------------------------------------------------------------- train

int cmd_train(const ConfigFlags& cf, const DataFlags& df, const std::string& out_dir,
              const std::optional<std::string>& resume, std::ostream& out) {
    require_source(df, "train");
    std::optional<TrainState> state;
    Resolved cfg;
    if (resume) {
        state.emplace(from_checkpoint(load_checkpoint(*resume)));
        cfg = {state->model.config(), state->config};
        out << "resuming from " << *resume << " after epoch " << state->epoch << "\n";
    } else {
        cfg = resolve(cf);
    }
    echo(out, "train", describe(cfg));

    auto samples = load_samples(df, cfg.train.seed, cfg.model.height, cfg.model.width, "train");
    std::vector<Sample> train, val, test;
    if (samples.size() >= 5) {
        SplitSpec spec;
        spec.seed = cfg.train.seed;
        auto parts = split(samples, spec);
        train = std::move(parts.train);
        val = std::move(parts.val);
        test = std::move(parts.test);
    } else {
        out << "fewer than 5 samples: training on all of them without validation\n";
        train = std::move(samples);
    }
    out << "samples: train " << train.size() << ", val " << val.size() << ", test " << test.size() << "\n";

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    write_text(dir / "config.txt", describe(cfg));
    if (!state) state.emplace(cfg.model, cfg.train);

    Trainer trainer(*state, train, val, dir);
    trainer.on_epoch = [&](const HistoryRow& row) {
        out << "epoch " << row.epoch << "/" << cfg.train.epochs << "  lr " << sci(row.lr) << "  loss "
            << fmt(row.train_loss, 5);
        if (!std::isnan(row.val_mdice)) {
            out << "  val mIoU " << fmt(row.val_miou) << " mDice " << fmt(row.val_mdice) << " MAE "
                << fmt(row.val_mae);
        }
        out << "\n";
    };
    if (trainer.done()) out << "checkpoint already completed all " << cfg.train.epochs << " epochs\n";
    trainer.run();

    if (!test.empty()) {
        out << "held-out test split:\n" << evaluate(test, state->model, cfg.train.threshold).table("metapolyp");
    }
    out << "wrote " << (dir / "history.csv").string() << " and " << (dir / "last.ckpt").string() << "\n";
    return kExitOk;
}

// ----------------------------------------------------------------- eval

int cmd_eval(const ConfigFlags& cf, const DataFlags& df, const std::optional<std::string>& checkpoint, bool oracle,
             const std::optional<std::string>& csv_path, std::ostream& out) {
    if (!oracle && !checkpoint) throw UsageError("eval: pass --checkpoint FILE or --oracle");
    require_source(df, "eval");
    Resolved cfg = resolve(cf);
    std::optional<TrainState> state;
    if (!oracle) {
        state.emplace(from_checkpoint(load_checkpoint(*checkpoint)));
        cfg.model = state->model.config();
        if (!cf.threshold) cfg.train.threshold = state->config.threshold;
    }
    std::ostringstream body;
    body << describe(cfg) << "checkpoint = " << (oracle ? "none (oracle)" : *checkpoint) << "\n";
    echo(out, "eval", body.str());

    const auto samples = load_samples(df, cfg.train.seed, cfg.model.height, cfg.model.width, "eval");
    const EvalReport report =
        oracle ? evaluate(samples, [](const Sample& s) { return s.mask; }, cfg.train.threshold)
               : evaluate(samples, state->model, cfg.train.threshold);
    out << report.table(oracle ? "oracle" : "metapolyp");
    if (csv_path) {
        write_text(*csv_path, report.csv());
        out << "wrote " << *csv_path << "\n";
    } else {
        out << report.csv();
    }
    return kExitOk;
}

// -------------------------------------------------------------- predict

Raster to_rgb(const Raster& r) {
    if (r.channels == 3) return r;
    Raster out{r.width, r.height, 3, {}};
    out.pixels.reserve(r.pixels.size() * 3);
    for (auto v : r.pixels) out.pixels.insert(out.pixels.end(), 3, v);
    return out;
}

/// Panels of equal extents placed left to right.
Raster side_by_side(const std::vector<Raster>& panels) {
    const std::size_t w = panels.at(0).width, h = panels.at(0).height;
    Raster out{w * panels.size(), h, 3, std::vector<std::uint8_t>(w * panels.size() * h * 3)};
    for (std::size_t p = 0; p < panels.size(); ++p) {
        const Raster rgb = to_rgb(panels[p]);
        for (std::size_t y = 0; y < h; ++y) {
            std::copy_n(rgb.pixels.begin() + static_cast<std::ptrdiff_t>(y * w * 3), w * 3,
                        out.pixels.begin() + static_cast<std::ptrdiff_t>((y * out.width + p * w) * 3));
        }
    }
    return out;
}

int cmd_predict(const ConfigFlags& cf, const std::optional<std::string>& checkpoint, const std::string& image_path,
                const std::optional<std::string>& truth_path, const std::string& out_dir, bool composite,
                std::ostream& out) {
    if (!checkpoint) throw UsageError("predict: --checkpoint FILE is required");
    const TrainState state = from_checkpoint(load_checkpoint(*checkpoint));
    Resolved cfg{state.model.config(), state.config};
    if (cf.threshold) cfg.train.threshold = static_cast<float>(parse_double("threshold", *cf.threshold));
    std::ostringstream body;
    body << describe(cfg) << "checkpoint = " << *checkpoint << "\nimage = " << image_path << "\n";
    echo(out, "predict", body.str());

    const Raster input = read_pnm(image_path);
    const Tensor image = image_from_raster(input);
    const Prediction p = predict(state.model, image, cfg.train.threshold);

    const fs::path dir(out_dir);
    fs::create_directories(dir);
    const std::string stem = fs::path(image_path).stem().string();
    const fs::path mask_path = dir / (stem + "_mask.pgm");
    const fs::path prob_path = dir / (stem + "_prob.pgm");
    write_pnm(mask_path, raster_from_mask(p.mask));
    write_pnm(prob_path, raster_from_probability(p.probabilities));
    out << "wrote " << mask_path.string() << " and " << prob_path.string() << "\n";
    out << "foreground fraction " << fmt(p.mask.sum() / static_cast<double>(p.mask.size())) << "\n";

    if (composite) {
        Raster middle = raster_from_probability(p.probabilities);
        if (truth_path) {
            const Tensor truth = mask_from_raster(read_pnm(*truth_path));
            if (truth.shape() != p.mask.shape()) throw DimensionError("predict: truth mask extents differ from image");
            middle = raster_from_mask(truth);
            out << "IoU " << fmt(iou(p.mask, truth)) << "  Dice " << fmt(dice(p.mask, truth)) << "\n";
        }
        const fs::path comp = dir / (stem + "_composite.ppm");
        write_pnm(comp, side_by_side({input, middle, raster_from_mask(p.mask)}));
        out << "wrote " << comp.string() << " (input | " << (truth_path ? "truth" : "probability")
            << " | prediction)\n";
    }
    return kExitOk;
}

// ------------------------------------------------------------ gradcheck

int cmd_gradcheck(const ConfigFlags& cf, double tol, double block_tol, std::ostream& out) {
    const Resolved cfg = resolve(cf);
    std::ostringstream body;
    body << "seed = " << cfg.train.seed << "\nblock_tolerance = " << format_double(block_tol)
         << "\nend_to_end_tolerance = " << format_double(tol) << "\nend_to_end_model = tiny 32x32\n";
    echo(out, "gradcheck", body.str());

    const auto start = std::chrono::steady_clock::now();
    const SuiteReport report = gradient_suite(cfg.train.seed, block_tol, tol);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    for (const auto& c : report.checks) {
        out << std::left << std::setw(22) << c.block << " max rel err " << sci(c.max_rel_error()) << "  tol "
            << sci(c.tolerance) << "  " << (c.passed() ? "ok" : "FAIL") << "\n";
    }
    out << "elapsed " << fmt(seconds, 1) << " s\n";
    if (report.passed()) {
        out << "gradient check passed\n";
        return kExitOk;
    }
    out << "gradient check failed for:\n";
    for (const auto& name : report.offending_parameters()) out << "  " << name << "\n";
    return kExitCheckFailed;
}

// ---------------------------------------------------------------- synth

int cmd_synth(const ConfigFlags& cf, std::size_t n, const std::string& out_dir, std::ostream& out) {
    const Resolved cfg = resolve(cf);
    if (n == 0) throw UsageError("synth: --n must be positive");
    std::ostringstream body;
    body << "seed = " << cfg.train.seed << "\nsize = " << cfg.model.height << "\nn = " << n << "\nout = " << out_dir
         << "\n";
    echo(out, "synth", body.str());
    write_dataset(out_dir, synthetic_samples(cfg.train.seed, cfg.model.height, n));
    out << "wrote " << n << " samples to " << out_dir << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Meta-Polyp segmentation: training, evaluation and prediction"};
    app.name("metapolyp");
    app.require_subcommand(1);

    ConfigFlags cf;
    DataFlags df;
    std::string out_dir;
    std::optional<std::string> checkpoint, csv_path, truth;
    std::string image;
    bool oracle = false, composite = false;
    double tol = kEndToEndGradTolerance, block_tol = kBlockGradTolerance;
    std::size_t n = 0;

    auto* train = app.add_subcommand("train", "Train a model");
    add_config_flags(*train, cf, true);
    add_data_flags(*train, df);
    train->add_option("--out", out_dir, "Output directory for history.csv and checkpoints")
        ->type_name("DIR")
        ->default_val("run");
    train->add_option("--checkpoint", checkpoint, "Resume from this checkpoint")->type_name("FILE");

    auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset");
    add_config_flags(*eval, cf, false);
    add_data_flags(*eval, df);
    eval->add_option("--checkpoint", checkpoint)->type_name("FILE");
    eval->add_flag("--oracle", oracle, "Score the truth against itself instead of running a model");
    eval->add_option("--out", csv_path, "Write per-sample rows as CSV here")->type_name("FILE");

    auto* pred = app.add_subcommand("predict", "Segment one image");
    add_config_flags(*pred, cf, false);
    pred->add_option("--checkpoint", checkpoint)->type_name("FILE");
    pred->add_option("image,--image", image, "Input image (binary PPM)")->required()->type_name("FILE");
    pred->add_option("--truth", truth, "Ground-truth mask shown in the composite")->type_name("FILE");
    pred->add_option("--out", out_dir, "Output directory")->type_name("DIR")->default_val(".");
    pred->add_flag("--composite", composite, "Also write an input | truth | prediction image");

    auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every block and the whole model");
    add_config_flags(*grad, cf, false);
    grad->add_option("--tol", tol, "End-to-end relative error tolerance")->type_name("T");
    grad->add_option("--block-tol", block_tol, "Per-block relative error tolerance")->type_name("T");

    auto* synth = app.add_subcommand("synth", "Write synthetic samples in the dataset layout");
    add_config_flags(*synth, cf, false);
    synth->add_option("--n", n, "Number of samples")->required()->type_name("N");
    synth->add_option("out,--out", out_dir, "Output directory")->required()->type_name("DIR");

    std::vector<const char*> argv{"metapolyp"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*train) return cmd_train(cf, df, out_dir, checkpoint, out);
        if (*eval) return cmd_eval(cf, df, checkpoint, oracle, csv_path, out);
        if (*pred) return cmd_predict(cf, checkpoint, image, truth, out_dir, composite, out);
        if (*grad) return cmd_gradcheck(cf, tol, block_tol, out);
        if (*synth) return cmd_synth(cf, n, out_dir, out);
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace metapolyp
