#include "metapolyp/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "metapolyp/data.hpp"
#include "metapolyp/error.hpp"
#include "metapolyp/keyvalue.hpp"
#include "metapolyp/model.hpp"
#include "metapolyp/ops.hpp"

namespace metapolyp {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                             " differ");
    }
}

void require_binary(const Tensor& t, const char* op, const char* what) {
    for (float v : t.data()) {
        if (v != 0.0f && v != 1.0f) throw UsageError(std::string(op) + ": " + what + " is not a binary mask");
    }
}

struct Counts {
    std::size_t pred = 0, truth = 0, both = 0;
};

Counts count(const Tensor& pred, const Tensor& truth, const char* op) {
    require_same_shape(pred, truth, op);
    require_binary(pred, op, "prediction");
    require_binary(truth, op, "truth");
    Counts c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred[i] != 0.0f, t = truth[i] != 0.0f;
        c.pred += p;
        c.truth += t;
        c.both += p && t;
    }
    return c;
}

}  // namespace

Var jaccard_loss(Var pred, const Tensor& truth, double alpha) {
    if (!(alpha > 0.0)) throw ConfigError("jaccard_loss: alpha must be positive");
    const Tensor& p = pred.value();
    require_same_shape(p, truth, "jaccard_loss");
    require_binary(truth, "jaccard_loss", "truth");
    double inter = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double y = truth[i], q = p[i];
        inter += y * q;
        uni += y + q - y * q;
    }
    const double ratio = (alpha + inter) / (alpha + uni);
    Tensor out({1}, static_cast<float>(alpha * (1.0 - ratio)));
    return pred.tape->record("jaccard_loss", std::move(out), {pred},
                             [pred, truth, alpha, inter, uni](Tape& t, const Tensor& g, const Tensor&) {
                                 const double a = alpha + inter, b = alpha + uni;
                                 const double go = g[0];
                                 Tensor gp(truth.shape());
                                 for (std::size_t i = 0; i < gp.size(); ++i) {
                                     const double y = truth[i];
                                     // d/dp of -alpha * a / b with da = y, db = 1 - y.
                                     gp[i] = static_cast<float>(-go * alpha * (y * b - a * (1.0 - y)) / (b * b));
                                 }
                                 t.accumulate(pred, gp);
                             });
}

Var jaccard_loss(const std::vector<Var>& preds, const std::vector<Tensor>& truths, double alpha) {
    if (preds.empty() || preds.size() != truths.size()) {
        throw UsageError("jaccard_loss: need matching, non-empty prediction and truth lists");
    }
    Var total = jaccard_loss(preds[0], truths[0], alpha);
    for (std::size_t i = 1; i < preds.size(); ++i) total = ops::add(total, jaccard_loss(preds[i], truths[i], alpha));
    return preds.size() == 1 ? total : ops::scale(total, 1.0f / static_cast<float>(preds.size()));
}

Tensor binarize(const Tensor& probabilities, float threshold) {
    Tensor out(probabilities.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = probabilities[i] >= threshold ? 1.0f : 0.0f;
    return out;
}

double iou(const Tensor& pred_binary, const Tensor& truth) {
    const auto c = count(pred_binary, truth, "iou");
    const std::size_t uni = c.pred + c.truth - c.both;
    return uni == 0 ? 1.0 : static_cast<double>(c.both) / static_cast<double>(uni);
}

double dice(const Tensor& pred_binary, const Tensor& truth) {
    const auto c = count(pred_binary, truth, "dice");
    const std::size_t denom = c.pred + c.truth;
    return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.both) / static_cast<double>(denom);
}

double mae(const Tensor& pred, const Tensor& truth) {
    require_same_shape(pred, truth, "mae");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::fabs(static_cast<double>(pred[i]) - truth[i]);
    return s / static_cast<double>(pred.size());
}

EvalReport evaluate_maps(const std::vector<std::string>& ids, const std::vector<Tensor>& probabilities,
                         const std::vector<Tensor>& truths, float threshold) {
    if (probabilities.empty()) throw UsageError("evaluate: empty dataset");
    if (probabilities.size() != truths.size() || ids.size() != truths.size()) {
        throw UsageError("evaluate: ids, predictions and masks differ in count");
    }
    EvalReport r;
    r.samples.reserve(truths.size());
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const Tensor b = binarize(probabilities[i], threshold);
        r.samples.push_back({ids[i], iou(b, truths[i]), dice(b, truths[i]), mae(probabilities[i], truths[i])});
    }
    for (const auto& s : r.samples) {
        r.mean_iou += s.iou;
        r.mean_dice += s.dice;
        r.mean_mae += s.mae;
    }
    const auto n = static_cast<double>(r.samples.size());
    r.mean_iou /= n;
    r.mean_dice /= n;
    r.mean_mae /= n;
    return r;
}

EvalReport evaluate(const std::vector<Sample>& dataset, const Predictor& predict, float threshold) {
    if (dataset.empty()) throw UsageError("evaluate: empty dataset");
    std::vector<std::string> ids;
    std::vector<Tensor> maps, truths;
    for (const auto& s : dataset) {
        ids.push_back(s.id);
        maps.push_back(predict(s));
        truths.push_back(s.mask);
    }
    return evaluate_maps(ids, maps, truths, threshold);
}

EvalReport evaluate(const std::vector<Sample>& dataset, const Model& model, float threshold) {
    return evaluate(dataset, [&](const Sample& s) { return model.forward(s.image).probabilities; }, threshold);
}

std::string EvalReport::table(const std::string& model_name) const {
    char row[256];
    std::ostringstream os;
    std::snprintf(row, sizeof row, "%-20s %8s %8s %8s\n", "model", "mIoU", "mDice", "MAE");
    os << row;
    std::snprintf(row, sizeof row, "%-20s %8.4f %8.4f %8.4f\n", model_name.c_str(), mean_iou, mean_dice, mean_mae);
    os << row;
    return os.str();
}

std::string EvalReport::csv() const {
    std::ostringstream os;
    os << "id,iou,dice,mae\n";
    auto row = [&](const std::string& id, double a, double b, double c) {
        os << id << ',' << format_double(a) << ',' << format_double(b) << ',' << format_double(c) << '\n';
    };
    for (const auto& s : samples) row(s.id, s.iou, s.dice, s.mae);
    row("mean", mean_iou, mean_dice, mean_mae);
    return os.str();
}

}  // namespace metapolyp
