#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "metapolyp/augment.hpp"
#include "metapolyp/checkpoint.hpp"
#include "metapolyp/cli.hpp"
#include "metapolyp/data.hpp"
#include "metapolyp/error.hpp"
#include "metapolyp/gradsuite.hpp"
#include "metapolyp/metrics.hpp"
#include "metapolyp/model.hpp"
#include "metapolyp/netpbm.hpp"
#include "metapolyp/train.hpp"

namespace py = pybind11;
using namespace metapolyp;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

py::array_t<float> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<float> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

double loss_value(const FloatArray& pred, const FloatArray& truth, double alpha) {
    Tape tape(Tape::Mode::Inference);
    return jaccard_loss(tape.constant(to_tensor(pred)), to_tensor(truth), alpha).value()[0];
}

py::dict sample_dict(const Sample& s) {
    py::dict d;
    d["id"] = s.id;
    d["image"] = to_array(s.image);
    d["mask"] = to_array(s.mask);
    return d;
}

Sample to_sample(const py::dict& d) {
    return {d["id"].cast<std::string>(), to_tensor(d["image"].cast<FloatArray>()),
            to_tensor(d["mask"].cast<FloatArray>())};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Meta-Polyp segmentation engine";

    auto base = py::register_exception<Error>(m, "Error");
    py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<UsageError>(m, "UsageError", base.ptr());
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<PairingError>(m, "PairingError", base.ptr());
    py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());

    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_static("tiny", &ModelConfig::tiny, py::arg("hw") = 64)
        .def_static("parse", &ModelConfig::parse)
        .def_readwrite("height", &ModelConfig::height)
        .def_readwrite("width", &ModelConfig::width)
        .def_readwrite("stage_channels", &ModelConfig::stage_channels)
        .def_readwrite("blocks_per_stage", &ModelConfig::blocks_per_stage)
        .def_readwrite("mlp_ratio", &ModelConfig::mlp_ratio)
        .def_readwrite("heads", &ModelConfig::heads)
        .def_readwrite("decoder_channels", &ModelConfig::decoder_channels)
        .def_readwrite("upsample_kernel", &ModelConfig::upsample_kernel)
        .def_readwrite("mixer_kernel", &ModelConfig::mixer_kernel)
        .def_readwrite("seed", &ModelConfig::seed)
        .def("validate", &ModelConfig::validate)
        .def("serialize", &ModelConfig::serialize)
        .def("__repr__", [](const ModelConfig& c) { return "ModelConfig(\n" + c.serialize() + ")"; });

    py::class_<Model>(m, "Model")
        .def(py::init<const ModelConfig&>(), py::arg("config"))
        .def_static(
            "load",
            [](const std::filesystem::path& path) {
                TrainState state = from_checkpoint(load_checkpoint(path));
                return std::move(state.model);
            },
            py::arg("checkpoint"), "Model weights from a training checkpoint.")
        .def_property_readonly("config", &Model::config)
        .def("parameter_count", &Model::parameter_count)
        .def(
            "predict",
            [](const Model& model, const FloatArray& image) {
                Tensor p;
                {
                    py::gil_scoped_release release;
                    p = model.forward(to_tensor(image)).probabilities;
                }
                return to_array(p);
            },
            py::arg("image"), "H x W x 1 probability map for an H x W x 3 image in [-1, 1].")
        .def(
            "forward",
            [](const Model& model, const FloatArray& image) {
                ModelOutput out;
                {
                    py::gil_scoped_release release;
                    out = model.forward(to_tensor(image));
                }
                py::dict d;
                d["probabilities"] = to_array(out.probabilities);
                py::list enc, dec;
                for (const auto& t : out.encoder) enc.append(to_array(t));
                for (const auto& t : out.decoder) dec.append(to_array(t));
                d["encoder"] = enc;
                d["decoder"] = dec;
                return d;
            },
            py::arg("image"), "Probabilities plus every encoder and decoder feature map.");

    m.def("jaccard_loss", &loss_value, py::arg("pred"), py::arg("truth"), py::arg("alpha") = kDefaultAlpha);
    m.def(
        "binarize", [](const FloatArray& p, float thr) { return to_array(binarize(to_tensor(p), thr)); },
        py::arg("probabilities"), py::arg("threshold") = kDefaultThreshold);
    m.def(
        "iou", [](const FloatArray& a, const FloatArray& b) { return iou(to_tensor(a), to_tensor(b)); },
        py::arg("pred"), py::arg("truth"));
    m.def(
        "dice", [](const FloatArray& a, const FloatArray& b) { return dice(to_tensor(a), to_tensor(b)); },
        py::arg("pred"), py::arg("truth"));
    m.def(
        "mae", [](const FloatArray& a, const FloatArray& b) { return mae(to_tensor(a), to_tensor(b)); },
        py::arg("pred"), py::arg("truth"));

    m.def(
        "synth_polyp",
        [](std::uint64_t seed, std::size_t size, std::size_t n) {
            Rng rng(seed);
            py::list out;
            for (const auto& s : synth_polyp(rng, size, n)) out.append(sample_dict(s));
            return out;
        },
        py::arg("seed"), py::arg("size"), py::arg("n"),
        "Synthetic samples as dicts with 'id', 'image' (H x W x 3) and 'mask' (H x W x 1).");
    m.def(
        "load_dataset",
        [](const std::filesystem::path& images, const std::filesystem::path& masks, std::size_t h, std::size_t w) {
            py::list out;
            for (const auto& s : load_dataset(images, masks, h, w)) out.append(sample_dict(s));
            return out;
        },
        py::arg("images_dir"), py::arg("masks_dir"), py::arg("height"), py::arg("width"));
    m.def(
        "flip_h", [](const py::dict& s) { return sample_dict(flip_h(to_sample(s))); }, py::arg("sample"));
    m.def(
        "flip_v", [](const py::dict& s) { return sample_dict(flip_v(to_sample(s))); }, py::arg("sample"));

    m.def(
        "cosine_lr",
        [](std::uint64_t t, std::uint64_t total, double lr_max, double lr_min) {
            return cosine_lr(t, {lr_max, lr_min, total});
        },
        py::arg("t"), py::arg("total_steps"), py::arg("lr_max") = 1e-4, py::arg("lr_min") = 0.0);

    m.def(
        "gradient_suite",
        [](std::uint64_t seed, double block_tol, double end_to_end_tol) {
            SuiteReport r;
            {
                py::gil_scoped_release release;
                r = gradient_suite(seed, block_tol, end_to_end_tol);
            }
            py::dict d;
            for (const auto& c : r.checks) d[py::str(c.block)] = c.max_rel_error();
            return py::make_tuple(r.passed(), d);
        },
        py::arg("seed") = 1, py::arg("block_tol") = kBlockGradTolerance,
        py::arg("end_to_end_tol") = kEndToEndGradTolerance,
        "Runs the finite-difference suite; returns (passed, {block: max relative error}).");

    m.def(
        "run_cli",
        [](const std::vector<std::string>& args) {
            std::ostringstream out, err;
            int code;
            {
                py::gil_scoped_release release;
                code = run_cli(args, out, err);
            }
            return py::make_tuple(code, out.str(), err.str());
        },
        py::arg("args"), "Runs a command line (without the program name); returns (exit_code, stdout, stderr).");
}
