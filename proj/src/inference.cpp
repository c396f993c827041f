#include "r2mf/inference.hpp"

#include <limits>

#include "r2mf/postprocess.hpp"

namespace r2mf {

Tensor<float> predict_probability(const Model<float>& model, const Tensor<float>& image) {
    Tape<float> tape(false);
    auto x = make_var<float>(image.dims(), std::vector<float>(image.data().begin(), image.data().end()));
    return *model.cascade_forward(tape, x, ForwardContext{}).fine;
}

MetricsRecord score_prediction(const std::string& id, const std::string& view, const BinaryMask& pred,
                               const BinaryMask& truth) {
    MetricsRecord r{id, view, iou(pred, truth), dice_coef(pred, truth), 0.0, 0.0};
    try {
        r.asd = asd(pred, truth);
        r.hd95 = hd95(pred, truth);
    } catch (const UndefinedMetric&) {
        r.asd = r.hd95 = std::numeric_limits<double>::quiet_NaN();
    }
    return r;
}

MetricsReport evaluate_dataset(const Model<float>& model, const std::vector<SegmentationSample>& samples,
                               const EvalOptions& opts, const PredictionSink& sink) {
    MetricsReport report;
    for (const auto& s : samples) {
        const auto prob = predict_probability(model, s.image);
        const auto mask = opts.postprocess ? postprocess_pipeline(prob, opts.threshold) : threshold(prob, opts.threshold);
        report.add(score_prediction(s.id, std::string(view_name(s.view)), mask, s.mask));
        if (sink) sink(s, prob, mask);
    }
    report.sort();
    return report;
}

}  // namespace r2mf
