// Acceptance gate: one PASS/FAIL line per criterion. Arguments select criteria
// by number (default: all). Exit status is 0 only if every selected one passes.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "count_oracle.hpp"
#include "oracles.hpp"
#include "r2mf/checkpoint.hpp"
#include "r2mf/data.hpp"
#include "r2mf/gradsuite.hpp"
#include "r2mf/inference.hpp"
#include "r2mf/loss.hpp"
#include "r2mf/metrics.hpp"
#include "r2mf/postprocess.hpp"
#include "r2mf/trainer.hpp"

using namespace r2mf;
using r2mf::testing::CountOracle;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<SegmentationSample> split_of(const Dataset& ds, Split s) {
    std::vector<SegmentationSample> out;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        if (ds.manifest[i].split == s) out.push_back(ds.samples[i]);
    return out;
}

// Small fixed data for the structural criteria: 3 train and 3 val samples.
struct TinyData {
    std::vector<SegmentationSample> train, val;
};
const TinyData& tiny() {
    static const TinyData d = [] {
        const Dataset ds = generate_dataset(1, 64, QualityMix{}, 5);
        return TinyData{split_of(ds, Split::train), split_of(ds, Split::val)};
    }();
    return d;
}

TrainConfig quick_train(std::size_t epochs) {
    TrainConfig t;
    t.max_epochs = epochs;
    t.augment = false;
    return t;
}

ModelConfig ablation(unsigned mask) {
    ModelConfig c = ModelConfig::desk();
    c.use_r2jump = mask & 1u;
    c.use_inception = mask & 2u;
    c.use_mcskip = mask & 4u;
    c.use_scse = mask & 8u;
    return c;
}

double mean_dice_of(const MetricsReport& r, const std::string& view) {
    for (const auto& s : r.summaries())
        if (s.view == view) return s.dice;
    return std::nan("");
}

// ---- 1 ----
Outcome gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t total = 0, failed = 0;
    double worst_block = 0.0, e2e32 = 0.0, e2e64 = 0.0;
    std::string failures;
    for (auto p : {CheckPrecision::f32, CheckPrecision::f64}) {
        GradSuiteOptions o = GradSuiteOptions::defaults(p);
        o.model = ModelConfig::desk();
        o.samples = 50;
        // The defaults must be at least as strict as the gate.
        const double block_gate = 1e-3, e2e_gate = p == CheckPrecision::f32 ? 1e-2 : 1e-4;
        if (o.block_tol > block_gate || o.e2e_tol > e2e_gate) return {false, "suite tolerances looser than the gate"};
        run_gradient_suite(o, [&](const GradSuiteResult& r) {
            ++total;
            const bool ok = r.report.passed && r.report.max_rel_error <= (r.end_to_end ? e2e_gate : block_gate);
            if (!ok) {
                ++failed;
                failures += " " + r.name;
            }
            if (r.end_to_end)
                (p == CheckPrecision::f32 ? e2e32 : e2e64) = r.report.max_rel_error;
            else
                worst_block = std::max(worst_block, r.report.max_rel_error);
        });
    }
    const double secs = seconds_since(t0);
    const bool pass = failed == 0 && total > 0 && secs < 300.0;
    return {pass, fmt("%zu/%zu checks, worst block rel %.2e (<=1e-3), e2e rel %.2e (<=1e-2, 32-bit) %.2e (<=1e-4, "
                      "64-bit), %.0fs (<300s)%s",
                      total - failed, total, worst_block, e2e32, e2e64, secs, failures.c_str())};
}

// ---- 2 ----
struct Converged {};

Outcome overfit() {
    const auto t0 = std::chrono::steady_clock::now();
    auto samples = split_of(generate_dataset(3, 64, QualityMix{}, 11), Split::train);
    samples.pop_back();  // 3 coronal, 3 left, 2 right
    Model<float> model(ModelConfig::desk());
    TrainConfig t;
    t.max_epochs = 200;
    t.augment = false;
    t.lr = 1e-3;
    t.early_stop_patience = 200;
    std::size_t reached = 0;
    double dice = 0.0, iou_ = 0.0;
    try {
        train(model, samples, samples, t, [&](const EpochRecord& e, const PlateauTracker&) {
            const auto report = evaluate_dataset(model, samples, EvalOptions{});
            for (const auto& s : report.summaries())
                if (s.view == "all") {
                    dice = s.dice;
                    iou_ = s.iou;
                }
            if (dice >= 0.95 && iou_ >= 0.90) {
                reached = e.epoch;
                throw Converged{};
            }
        });
    } catch (const Converged&) {
    }
    const double secs = seconds_since(t0);
    const bool pass = reached > 0 && secs < 1800.0;
    return {pass, fmt("8 samples, train Dice %.4f (>=0.95) IoU %.4f (>=0.90) at epoch %zu (<=200), %.0fs (<1800s)", dice,
                      iou_, reached, secs)};
}

// ---- 3 ----
Outcome generalization() {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = generate_dataset(24, 64, QualityMix{}, 1);
    const auto train_set = split_of(ds, Split::train), val_set = split_of(ds, Split::val);
    Model<float> model(ModelConfig::desk());
    TrainConfig t;  // default rate, augmentation on
    t.max_epochs = 12;
    const TrainResult r = train(model, train_set, val_set, t);
    restore_snapshot(model, r.best);
    const auto report = evaluate_dataset(model, val_set, EvalOptions{});
    bool pass = true;
    std::string per_view;
    for (View v : kViews) {
        const double d = mean_dice_of(report, std::string(view_name(v)));
        pass = pass && d >= 0.85;
        per_view += fmt(" %s %.4f", std::string(view_name(v)).c_str(), d);
    }
    return {pass, fmt("%zu train / %zu val, best epoch %zu of %zu, val Dice%s (each >=0.85), %.0fs", train_set.size(),
                      val_set.size(), r.best_epoch, t.max_epochs, per_view.c_str(), seconds_since(t0))};
}

// ---- 4 ----
Outcome ablations() {
    std::size_t counts[16];
    std::size_t trained = 0, oracle_ok = 0;
    for (unsigned mask = 0; mask < 16; ++mask) {
        Model<float> m(ablation(mask));
        counts[mask] = m.count_parameters();
        if (counts[mask] == CountOracle{m.config()}.total()) ++oracle_ok;
        const auto r = train(m, tiny().train, tiny().val, quick_train(1));
        if (r.history.size() == 1 && std::isfinite(r.history[0].train_loss)) ++trained;
    }
    std::size_t pairs = 0, ordered = 0;
    for (unsigned a = 0; a < 16; ++a)
        for (unsigned b = 0; b < 16; ++b)
            if (a != b && (a & b) == a) {
                ++pairs;
                if (counts[a] < counts[b]) ++ordered;
            }
    const bool full_max = *std::max_element(counts, counts + 16) == counts[15];
    const bool pass = trained == 16 && oracle_ok == 16 && ordered == pairs && full_max;
    return {pass, fmt("%zu/16 trained 1 epoch, %zu/16 match the count oracle, %zu/%zu subset pairs strictly ordered, "
                      "full model %zu params%s",
                      trained, oracle_ok, ordered, pairs, counts[15], full_max ? " (max)" : " (NOT max)")};
}

// ---- 5 ----
Outcome metric_oracles() {
    std::mt19937_64 rng(2024);
    std::size_t exact = 0, pairs = 0;
    double worst_identity = 0.0;
    while (pairs < 100) {
        const auto a = r2mf::testing::random_blob(32, 32, rng), b = r2mf::testing::random_blob(32, 32, rng);
        if (a.empty() || b.empty()) continue;
        ++pairs;
        if (asd(a, b) == r2mf::testing::brute_asd(a, b) && hd95(a, b) == r2mf::testing::brute_hd95(a, b)) ++exact;
        const double j = iou(a, b);
        worst_identity = std::max(worst_identity, std::abs(dice_coef(a, b) - 2.0 * j / (1.0 + j)));
    }
    BinaryMask s(6, 6), t(6, 6);
    for (std::size_t r = 1; r < 3; ++r)
        for (std::size_t c = 1; c < 3; ++c) {
            s.at(r, c) = 1;
            t.at(r, c + 1) = 1;
        }
    const double sq_iou = iou(s, t), sq_dice = dice_coef(s, t);
    const bool square_ok = std::abs(sq_iou - 1.0 / 3.0) <= 1e-15 && sq_dice == 0.5;
    const bool pass = exact == 100 && worst_identity <= 1e-9 && square_ok;
    return {pass, fmt("%zu/100 pairs ASD and HD95 equal brute force exactly, max |Dice - 2IoU/(1+IoU)| %.1e (<=1e-9), "
                      "shifted square IoU %.17g Dice %.17g",
                      exact, worst_identity, sq_iou, sq_dice)};
}

// ---- 6 ----
Outcome postprocess_oracles() {
    std::mt19937_64 rng(99);
    std::size_t lcc = 0, idem = 0, single = 0;
    for (int k = 0; k < 100; ++k) {
        const auto m = k % 2 ? r2mf::testing::random_noise_mask(32, 32, rng, 0.15 + 0.005 * k)
                             : r2mf::testing::random_blob(32, 32, rng, 4);
        if (largest_component(m) == r2mf::testing::flood_fill_largest(m)) ++lcc;
        const auto once = closing(m);
        if (closing(once) == once) ++idem;
        Tensor<float> p(Dims{1, 1, 32, 32});
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        for (auto& v : p.data()) v = u(rng);
        if (r2mf::testing::count_components(postprocess_pipeline(p)) <= 1) ++single;
    }
    return {lcc == 100 && idem == 100 && single == 100,
            fmt("largest_component = flood fill %zu/100, closing idempotent %zu/100, pipeline <=1 component %zu/100",
                lcc, idem, single)};
}

// ---- 7 ----
Outcome loss_identities() {
    const Dims d{1, 1, 16, 16};
    std::mt19937_64 rng(7);
    Tensor<double> mask(d);
    for (auto& v : mask.data()) v = rng() % 2 ? 1.0 : 0.0;

    Tape<double> quiet(false);
    const double bce = bce_loss(quiet, make_var<double>(d, 0.5), mask)->item();
    const double bce_err = std::abs(bce - std::log(2.0));
    const double dl = dice_loss(quiet, make_var<double>(d, std::vector<double>(mask.data().begin(), mask.data().end())), mask)->item();

    std::uniform_real_distribution<double> u(0.01, 0.99);
    std::vector<double> pf(mask.size());
    for (auto& v : pf) v = u(rng);
    const LossWeights w{0.0, 0.6};
    double reference = 0.0;
    std::size_t invariant = 0, zero_grad = 0;
    for (int k = 0; k < 20; ++k) {
        std::vector<double> pc(mask.size());
        for (auto& v : pc) v = k == 0 ? 0.5 : u(rng);
        auto pc_var = make_leaf<double>(d, std::move(pc));
        Tape<double> tape;
        auto l = total_loss(tape, pc_var, make_var<double>(d, pf), mask, w);
        if (k == 0) reference = l->item();
        if (l->item() == reference) ++invariant;
        tape.backward(l);
        if (std::all_of(pc_var->grad().begin(), pc_var->grad().end(), [](double g) { return g == 0.0; })) ++zero_grad;
    }
    const bool pass = bce_err <= 1e-6 && dl <= 1e-6 && invariant == 20 && zero_grad == 20;
    return {pass, fmt("|BCE(0.5) - ln2| %.1e (<=1e-6), dice_loss(P=M) %.1e (<=1e-6), lambda_c=0: %zu/20 coarse maps "
                      "give the identical loss, %zu/20 zero coarse gradients",
                      bce_err, dl, invariant, zero_grad)};
}

// ---- 8 ----
Outcome determinism() {
    auto run_once = [] {
        Model<float> m(ModelConfig::desk());
        TrainConfig t;
        t.max_epochs = 3;  // augmentation on: exercises every random stream
        auto r = train(m, tiny().train, tiny().val, t);
        return std::make_pair(std::move(m), std::move(r));
    };
    auto [m1, r1] = run_once();
    auto [m2, r2] = run_once();
    const bool history_same = r1.history == r2.history && r1.history.size() == 3;
    const bool weights_same = take_snapshot(m1).values == take_snapshot(m2).values;

    const Checkpoint ckpt = Checkpoint::capture(m1, &r1.adam, r1.history);
    const auto path = std::filesystem::temp_directory_path() / "r2mf_acceptance.ckpt";
    save_checkpoint(path, ckpt);
    const Checkpoint loaded = load_checkpoint(path);
    std::filesystem::remove(path);
    const bool bytes_same = encode_checkpoint(loaded) == encode_checkpoint(ckpt);
    const Model<float> restored = loaded.restore();
    std::size_t equal_maps = 0;
    for (const auto& s : tiny().val)
    {
        const auto a = predict_probability(restored, s.image), b = predict_probability(m1, s.image);
        if (std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end())) ++equal_maps;
    }
    const bool pass = history_same && weights_same && bytes_same && equal_maps == tiny().val.size();
    return {pass, fmt("history %s over %zu epochs, weights %s, checkpoint re-encode %s, %zu/%zu inference maps "
                      "bit-identical after reload",
                      history_same ? "bit-identical" : "DIFFERS", r1.history.size(),
                      weights_same ? "identical" : "DIFFER", bytes_same ? "byte-identical" : "DIFFERS", equal_maps,
                      tiny().val.size())};
}

// ---- 9 ----
Outcome sampler_balance() {
    std::vector<SegmentationSample> samples;
    const std::pair<View, int> counts[] = {{View::coronal, 4}, {View::left_bending, 2}, {View::right_bending, 2}};
    for (const auto& [v, n] : counts)
        for (int i = 0; i < n; ++i) {
            SegmentationSample s;
            s.id = fmt("s%d", i);
            s.view = v;
            samples.push_back(s);
        }
    std::size_t good = 0, trials = 0;
    std::size_t per_view[3] = {0, 0, 0};
    for (std::uint64_t seed : {1u, 2u, 3u})
        for (std::size_t epoch = 0; epoch < 4; ++epoch) {
            ++trials;
            const auto order = balanced_batches(samples, seed, epoch);
            std::size_t n[3] = {0, 0, 0};
            bool robin = order.size() == 12;
            for (std::size_t k = 0; k < order.size(); ++k) {
                const auto v = static_cast<std::size_t>(samples.at(order[k]).view);
                ++n[v];
                robin = robin && v == k % 3;
            }
            std::set<std::size_t> coronal;
            for (auto i : order)
                if (samples[i].view == View::coronal) coronal.insert(i);
            if (robin && n[0] == 4 && n[1] == 4 && n[2] == 4 && coronal.size() == 4) ++good;
            std::copy(n, n + 3, per_view);
        }
    return {good == trials, fmt("counts (4,2,2): %zu/%zu epochs give 12 iterations, round-robin, per view %zu/%zu/%zu, "
                                "every coronal sample once",
                                good, trials, per_view[0], per_view[1], per_view[2])};
}

// ---- 10 ----
Outcome recurrence() {
    std::string detail;
    std::size_t first = 0, completed = 0, matches = 0;
    bool equal = true;
    for (const std::vector<std::size_t>& steps :
         {std::vector<std::size_t>{4, 3, 2, 1}, {2, 2, 1, 1}, {5, 4, 3, 2}}) {
        ModelConfig cfg = ModelConfig::desk();
        cfg.steps = steps;
        Model<float> m(cfg);
        const std::size_t n = m.count_parameters();
        if (first == 0) first = n;
        equal = equal && n == first;
        if (n == CountOracle{cfg}.total()) ++matches;
        const auto r = train(m, tiny().train, tiny().val, quick_train(1));
        if (r.history.size() == 1 && std::isfinite(r.history[0].val_loss)) ++completed;
        detail += fmt(" (%zu,%zu,%zu,%zu)=%zu", steps[0], steps[1], steps[2], steps[3], n);
    }
    return {completed == 3 && equal && matches == 3,
            fmt("%zu/3 completed, %zu/3 match the count oracle, counts%s", completed, matches, detail.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
        {"gradient fidelity", gradient_fidelity}, {"overfit convergence", overfit},
        {"generalization", generalization},       {"ablation grid", ablations},
        {"metric oracles", metric_oracles},       {"post-processing oracles", postprocess_oracles},
        {"loss identities", loss_identities},     {"determinism and persistence", determinism},
        {"sampler balance", sampler_balance},     {"recurrence schedules", recurrence},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failed;
        std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
