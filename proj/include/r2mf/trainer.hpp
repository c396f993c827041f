#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "r2mf/augment.hpp"
#include "r2mf/data.hpp"
#include "r2mf/loss.hpp"
#include "r2mf/network.hpp"

namespace r2mf {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First and second moments per trainable parameter, in parameter order.
template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;
    std::uint64_t step = 0;

    void init(std::span<const NamedParam<T>> params);
};

/// Bias-corrected Adam update from the accumulated gradients. Moments are
/// allocated on first use; the caller zeroes gradients afterwards.
template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr, const AdamHyper& h = {});

struct TrainConfig {
    double lr = 1e-4;
    std::size_t lr_patience = 5;
    double lr_factor = 0.5;
    double lr_floor = 1e-6;
    double min_delta = 1e-5;
    std::size_t early_stop_patience = 15;
    std::size_t max_epochs = 150;
    std::size_t batch_size = 1;
    LossWeights loss;
    std::uint64_t seed = 7;  // sampling, augmentation and dropout streams
    bool augment = true;
    AugmentationConfig aug;

    void validate() const;
    /// Same contract as ModelConfig::set.
    bool set(std::string_view key, std::string_view value);
    std::string to_text() const;
};

/// Plateau bookkeeping on the validation loss. An epoch improves when its loss is
/// below best - min_delta. After lr_patience non-improving epochs in a row the rate
/// is multiplied by lr_factor (not below lr_floor) and the count restarts; after
/// early_stop_patience non-improving epochs since the best one, training stops.
class PlateauTracker {
   public:
    explicit PlateauTracker(const TrainConfig& cfg);

    struct Outcome {
        bool improved = false;
        bool lr_decayed = false;
        bool stop = false;
    };
    Outcome observe(double val_loss);

    double lr() const noexcept { return lr_; }
    double best() const noexcept { return best_; }
    std::size_t epochs_since_best() const noexcept { return since_best_; }

   private:
    double lr_, factor_, floor_, min_delta_;
    std::size_t lr_patience_, stop_patience_;
    double best_;
    std::size_t since_best_ = 0, since_decay_ = 0;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;  // rate used during the epoch
    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

std::string history_to_csv(const std::vector<EpochRecord>& history);

/// Raised when a training loss is NaN or infinite.
class NonFiniteLoss : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Copy of every tensor of a parameter set (parameters and buffers), in order.
struct ModelSnapshot {
    std::vector<std::vector<float>> values;
};
ModelSnapshot take_snapshot(const Model<float>& model);
void restore_snapshot(Model<float>& model, const ModelSnapshot& snap);

/// Converts a sample to the (1,1,H,W) image variable and {0,1} mask tensor.
Var<float> image_var(const SegmentationSample& s);
Tensor<float> mask_tensor(const SegmentationSample& s);

/// Mean total loss over a split in eval mode without recording a tape.
double evaluate_loss(const Model<float>& model, const std::vector<SegmentationSample>& samples, const LossWeights& w);

struct TrainResult {
    std::vector<EpochRecord> history;
    std::size_t best_epoch = 0;
    double best_val_loss = 0.0;
    ModelSnapshot best;
    AdamState<float> adam;  // state after the final epoch
    bool early_stopped = false;
};

using EpochCallback = std::function<void(const EpochRecord&, const PlateauTracker&)>;

/// Trains in place; on return the model holds the final-epoch weights and
/// `best` the weights of the epoch with the lowest validation loss.
TrainResult train(Model<float>& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

}  // namespace r2mf
