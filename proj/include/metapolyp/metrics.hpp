#pragma once

#include <functional>
#include <string>
#include <vector>

#include "metapolyp/autodiff.hpp"
#include "metapolyp/tensor.hpp"

namespace metapolyp {

struct Sample;
class Model;

inline constexpr double kDefaultAlpha = 0.7;
inline constexpr float kDefaultThreshold = 0.5f;

/// Smoothed Jaccard loss of one H x W x 1 prediction against a binary mask:
/// alpha * (1 - (alpha + sum(y*p)) / (alpha + sum(y + p - y*p))).
Var jaccard_loss(Var pred, const Tensor& truth, double alpha = kDefaultAlpha);

/// Mean of the per-image losses over a batch.
Var jaccard_loss(const std::vector<Var>& preds, const std::vector<Tensor>& truths, double alpha = kDefaultAlpha);

/// 1 where p >= threshold, else 0.
Tensor binarize(const Tensor& probabilities, float threshold = kDefaultThreshold);

/// Both arguments must be exactly binary. Two empty masks score 1.
double iou(const Tensor& pred_binary, const Tensor& truth);
double dice(const Tensor& pred_binary, const Tensor& truth);
/// Mean absolute error of the continuous map.
double mae(const Tensor& pred, const Tensor& truth);

struct SampleMetrics {
    std::string id;
    double iou = 0.0;
    double dice = 0.0;
    double mae = 0.0;
};

struct EvalReport {
    std::vector<SampleMetrics> samples;
    double mean_iou = 0.0;
    double mean_dice = 0.0;
    double mean_mae = 0.0;

    std::size_t count() const noexcept { return samples.size(); }

    /// Fixed-width summary table with one row for `model_name`.
    std::string table(const std::string& model_name) const;
    /// Header plus one row per sample and a final "mean" row. Numbers use the
    /// shortest text that reads back to the same double.
    std::string csv() const;
};

/// Scores probability maps against their masks, in the given order.
EvalReport evaluate_maps(const std::vector<std::string>& ids, const std::vector<Tensor>& probabilities,
                         const std::vector<Tensor>& truths, float threshold = kDefaultThreshold);

using Predictor = std::function<Tensor(const Sample&)>;

EvalReport evaluate(const std::vector<Sample>& dataset, const Predictor& predict, float threshold = kDefaultThreshold);
EvalReport evaluate(const std::vector<Sample>& dataset, const Model& model, float threshold = kDefaultThreshold);

}  // namespace metapolyp
