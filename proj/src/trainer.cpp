#include "r2mf/trainer.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "r2mf/text.hpp"

namespace r2mf {

template <typename T>
void AdamState<T>::init(std::span<const NamedParam<T>> params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p.var->size(), T(0));
        v.emplace_back(p.var->size(), T(0));
    }
    step = 0;
}

template <typename T>
void adam_step(std::span<const NamedParam<T>> params, AdamState<T>& state, double lr, const AdamHyper& h) {
    if (state.m.empty() && state.step == 0) state.init(params);
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (state.m[i].size() != params[i].var->size())
            throw std::invalid_argument("adam_step: moment shape mismatch for '" + params[i].name + "'");
    }
    ++state.step;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i].var;
        if (!p.has_grad()) continue;  // untouched this step: zero gradient leaves it unchanged
        auto g = std::as_const(p).grad();
        auto x = p.data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (std::size_t k = 0; k < x.size(); ++k) {
            const double gk = g[k];
            const double mk = h.beta1 * m[k] + (1.0 - h.beta1) * gk;
            const double vk = h.beta2 * v[k] + (1.0 - h.beta2) * gk * gk;
            m[k] = static_cast<T>(mk);
            v[k] = static_cast<T>(vk);
            x[k] = static_cast<T>(x[k] - lr * (mk / c1) / (std::sqrt(vk / c2) + h.eps));
        }
    }
}

void TrainConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("train config: " + msg);
    };
    require(lr > 0 && std::isfinite(lr), "lr must be positive");
    require(lr_patience >= 1, "lr_patience must be at least 1");
    require(lr_factor > 0 && lr_factor < 1, "lr_factor must lie in (0,1)");
    require(lr_floor >= 0 && lr_floor <= lr, "lr_floor must lie in [0, lr]");
    require(min_delta >= 0, "min_delta must be non-negative");
    require(early_stop_patience >= 1, "early_stop_patience must be at least 1");
    require(max_epochs >= 1, "max_epochs must be at least 1");
    require(batch_size == 1, "only batch_size=1 is supported");
    loss.validate();
    aug.validate();
}

bool TrainConfig::set(std::string_view key, std::string_view value) {
    using namespace text;
    if (key == "lr") lr = parse_double(key, value);
    else if (key == "lr_patience") lr_patience = parse_size(key, value);
    else if (key == "lr_factor") lr_factor = parse_double(key, value);
    else if (key == "lr_floor") lr_floor = parse_double(key, value);
    else if (key == "min_delta") min_delta = parse_double(key, value);
    else if (key == "early_stop_patience") early_stop_patience = parse_size(key, value);
    else if (key == "max_epochs") max_epochs = parse_size(key, value);
    else if (key == "batch_size") batch_size = parse_size(key, value);
    else if (key == "lambda_c") loss.coarse = parse_double(key, value);
    else if (key == "lambda_f") loss.fine = parse_double(key, value);
    else if (key == "train_seed") seed = parse_u64(key, value);
    else if (key == "augment") augment = parse_bool(key, value);
    else if (key == "flip_prob") aug.flip_prob = parse_double(key, value);
    else if (key == "rotation_deg") aug.rotation_deg = parse_double(key, value);
    else if (key == "scale_min") aug.scale_min = parse_double(key, value);
    else if (key == "scale_max") aug.scale_max = parse_double(key, value);
    else if (key == "translate_frac") aug.translate_frac = parse_double(key, value);
    else if (key == "gamma_min") aug.gamma_min = parse_double(key, value);
    else if (key == "gamma_max") aug.gamma_max = parse_double(key, value);
    else if (key == "noise_sigma") aug.noise_sigma = parse_double(key, value);
    else return false;
    return true;
}

std::string TrainConfig::to_text() const {
    using text::format_double;
    std::ostringstream os;
    os << "lr=" << format_double(lr) << '\n'
       << "lr_patience=" << lr_patience << '\n'
       << "lr_factor=" << format_double(lr_factor) << '\n'
       << "lr_floor=" << format_double(lr_floor) << '\n'
       << "min_delta=" << format_double(min_delta) << '\n'
       << "early_stop_patience=" << early_stop_patience << '\n'
       << "max_epochs=" << max_epochs << '\n'
       << "batch_size=" << batch_size << '\n'
       << "lambda_c=" << format_double(loss.coarse) << '\n'
       << "lambda_f=" << format_double(loss.fine) << '\n'
       << "train_seed=" << seed << '\n'
       << "augment=" << text::format_bool(augment) << '\n'
       << "flip_prob=" << format_double(aug.flip_prob) << '\n'
       << "rotation_deg=" << format_double(aug.rotation_deg) << '\n'
       << "scale_min=" << format_double(aug.scale_min) << '\n'
       << "scale_max=" << format_double(aug.scale_max) << '\n'
       << "translate_frac=" << format_double(aug.translate_frac) << '\n'
       << "gamma_min=" << format_double(aug.gamma_min) << '\n'
       << "gamma_max=" << format_double(aug.gamma_max) << '\n'
       << "noise_sigma=" << format_double(aug.noise_sigma) << '\n';
    return os.str();
}

PlateauTracker::PlateauTracker(const TrainConfig& cfg)
    : lr_(cfg.lr),
      factor_(cfg.lr_factor),
      floor_(cfg.lr_floor),
      min_delta_(cfg.min_delta),
      lr_patience_(cfg.lr_patience),
      stop_patience_(cfg.early_stop_patience),
      best_(std::numeric_limits<double>::infinity()) {}

PlateauTracker::Outcome PlateauTracker::observe(double val_loss) {
    Outcome o;
    if (val_loss < best_ - min_delta_) {
        best_ = val_loss;
        since_best_ = since_decay_ = 0;
        o.improved = true;
        return o;
    }
    ++since_best_;
    if (++since_decay_ >= lr_patience_) {
        since_decay_ = 0;
        const double next = std::max(lr_ * factor_, floor_);
        o.lr_decayed = next < lr_;
        lr_ = next;
    }
    o.stop = since_best_ >= stop_patience_;
    return o;
}

std::string history_to_csv(const std::vector<EpochRecord>& history) {
    std::string out = "epoch,train_loss,val_loss,lr\n";
    char buf[128];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss, e.lr);
        out += buf;
    }
    return out;
}

ModelSnapshot take_snapshot(const Model<float>& model) {
    ModelSnapshot s;
    for (const auto& e : model.params().entries()) s.values.emplace_back(e.value->data().begin(), e.value->data().end());
    return s;
}

void restore_snapshot(Model<float>& model, const ModelSnapshot& snap) {
    const auto& entries = model.params().entries();
    if (entries.size() != snap.values.size()) throw std::invalid_argument("restore_snapshot: tensor count mismatch");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        auto dst = entries[i].value->data();
        if (dst.size() != snap.values[i].size())
            throw std::invalid_argument("restore_snapshot: size mismatch for '" + entries[i].name + "'");
        std::copy(snap.values[i].begin(), snap.values[i].end(), dst.begin());
    }
}

Var<float> image_var(const SegmentationSample& s) {
    return make_var<float>(s.image.dims(), std::vector<float>(s.image.data().begin(), s.image.data().end()));
}

Tensor<float> mask_tensor(const SegmentationSample& s) {
    Tensor<float> m(Dims{1, 1, s.mask.h, s.mask.w});
    for (std::size_t i = 0; i < s.mask.size(); ++i) m.data()[i] = s.mask.bits[i] ? 1.0f : 0.0f;
    return m;
}

double evaluate_loss(const Model<float>& model, const std::vector<SegmentationSample>& samples, const LossWeights& w) {
    if (samples.empty()) throw std::invalid_argument("evaluate_loss: empty split");
    double total = 0.0;
    for (const auto& s : samples) {
        Tape<float> tape(false);
        const auto out = model.cascade_forward(tape, image_var(s), ForwardContext{});
        total += total_loss(tape, out.coarse, out.fine, mask_tensor(s), w)->item();
    }
    return total / static_cast<double>(samples.size());
}

TrainResult train(Model<float>& model, const std::vector<SegmentationSample>& train_set,
                  const std::vector<SegmentationSample>& val_set, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty training split");
    if (val_set.empty()) throw std::invalid_argument("train: empty validation split");

    TrainResult result;
    const auto params = model.params().trainable();
    result.adam.init(params);
    PlateauTracker plateau(cfg);
    std::mt19937_64 dropout_rng(mix_seed(cfg.seed, 0xd0));

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        const double lr = plateau.lr();
        const auto order = balanced_batches(train_set, cfg.seed, epoch);
        const std::uint64_t epoch_seed = mix_seed(cfg.seed, 0xa0000 + epoch);
        double sum = 0.0;
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto& src = train_set[order[k]];
            const SegmentationSample sample = cfg.augment ? augment(src, cfg.aug, mix_seed(epoch_seed, k)) : src;
            model.params().zero_grad();
            Tape<float> tape;
            const auto out = model.cascade_forward(tape, image_var(sample), ForwardContext{Mode::train, &dropout_rng});
            const auto loss = total_loss(tape, out.coarse, out.fine, mask_tensor(sample), cfg.loss);
            const double value = loss->item();
            if (!std::isfinite(value)) {
                throw NonFiniteLoss("non-finite training loss at epoch " + std::to_string(epoch) + ", step " +
                                    std::to_string(k + 1) + " (sample " + src.id + "/" +
                                    std::string(view_name(src.view)) + ")");
            }
            tape.backward(loss);
            adam_step<float>(params, result.adam, lr);
            sum += value;
        }
        model.params().zero_grad();

        EpochRecord rec{epoch, sum / static_cast<double>(order.size()), evaluate_loss(model, val_set, cfg.loss), lr};
        result.history.push_back(rec);
        const auto outcome = plateau.observe(rec.val_loss);
        if (outcome.improved) {
            result.best_epoch = epoch;
            result.best_val_loss = rec.val_loss;
            result.best = take_snapshot(model);
        }
        if (on_epoch) on_epoch(rec, plateau);
        if (outcome.stop) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::span<const NamedParam<float>>, AdamState<float>&, double, const AdamHyper&);
template void adam_step(std::span<const NamedParam<double>>, AdamState<double>&, double, const AdamHyper&);

}  // namespace r2mf
