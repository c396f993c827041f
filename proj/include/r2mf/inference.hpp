#pragma once

#include <functional>
#include <string>
#include <vector>

#include "r2mf/data.hpp"
#include "r2mf/metrics.hpp"
#include "r2mf/network.hpp"

namespace r2mf {

/// Fine-stage probability map (1,1,H,W) in eval mode.
Tensor<float> predict_probability(const Model<float>& model, const Tensor<float>& image);

/// Overlap and distance metrics of one prediction. Distances are NaN when the
/// prediction is empty.
MetricsRecord score_prediction(const std::string& id, const std::string& view, const BinaryMask& pred,
                               const BinaryMask& truth);

struct EvalOptions {
    bool postprocess = true;
    double threshold = 0.5;
};

/// Receives each sample with its raw probability map and final mask.
using PredictionSink = std::function<void(const SegmentationSample&, const Tensor<float>&, const BinaryMask&)>;

MetricsReport evaluate_dataset(const Model<float>& model, const std::vector<SegmentationSample>& samples,
                               const EvalOptions& opts = {}, const PredictionSink& sink = {});

}  // namespace r2mf
