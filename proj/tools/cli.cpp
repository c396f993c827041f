#include "cli.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "r2mf/checkpoint.hpp"
#include "r2mf/data.hpp"
#include "r2mf/gradsuite.hpp"
#include "r2mf/inference.hpp"
#include "r2mf/pgm.hpp"
#include "r2mf/postprocess.hpp"
#include "r2mf/run_config.hpp"
#include "r2mf/text.hpp"

namespace r2mf::cli {

namespace {

namespace fs = std::filesystem;

class UsageError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

class CheckFailed : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out || !out.write(s.data(), static_cast<std::streamsize>(s.size()))) {
        throw DataError("cannot write " + p.string());
    }
}

// Anything that goes wrong while reading inputs is a data error, whatever the thrower used.
template <typename F>
auto load(const std::string& what, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw DataError(what + ": " + e.what());
    }
}

std::vector<SegmentationSample> load_dataset_split(const std::string& root, Split split) {
    if (root.empty()) throw UsageError("--data is required");
    if (!fs::exists(fs::path(root) / "manifest.tsv")) throw DataError("no manifest.tsv under " + root);
    auto samples = load(root, [&] { return load_split(root, split); });
    if (samples.empty()) throw DataError(root + ": split '" + std::string(split_name(split)) + "' is empty");
    return samples;
}

Checkpoint load_ckpt(const std::string& path) {
    if (path.empty()) throw UsageError("--checkpoint is required");
    return load(path, [&] { return load_checkpoint(path); });
}

fs::path make_run_dir(const std::string& out, const std::string& name) {
    fs::path dir;
    if (!name.empty()) {
        dir = fs::path(out) / name;
    } else {
        const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
        std::tm tm{};
        localtime_r(&t, &tm);
        char buf[32];
        std::strftime(buf, sizeof buf, "run-%Y%m%d-%H%M%S", &tm);
        dir = fs::path(out) / buf;
        for (int k = 2; fs::exists(dir); ++k) dir = fs::path(out) / (std::string(buf) + "-" + std::to_string(k));
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

// ---- synth ----

struct SynthArgs {
    std::string out;
    std::size_t per_view = 24;
    std::size_t size = 64;
    std::uint64_t seed = 1;
    std::string quality_mix = "high";
};

int synth(const SynthArgs& a) {
    if (a.per_view == 0) throw UsageError("--per-view must be at least 1");
    const QualityMix mix = QualityMix::parse(a.quality_mix);
    const Dataset ds = generate_dataset(a.per_view, a.size, mix, a.seed);
    try {
        write_dataset(a.out, ds);
    } catch (const std::exception& e) {
        throw DataError(a.out + ": " + e.what());
    }
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& row : ds.manifest) {
        if (row.view == View::coronal) ++counts[static_cast<int>(row.split)];
    }
    std::printf("wrote %zu samples (%zux%zu) to %s: per view %zu train / %zu val / %zu test\n", ds.samples.size(),
                a.size, a.size, a.out.c_str(), counts[0], counts[1], counts[2]);
    return kOk;
}

// ---- train ----

struct TrainArgs {
    std::string config, preset = "desk", data, out, run_name;
    bool no_r2jump = false, no_inception = false, no_mcskip = false, no_scse = false;
    bool no_augment = false, dropout_after_scse = false;
    std::string lambda_c, lambda_f, recurrence, epochs, lr, seed;
};

RunConfig resolve(const TrainArgs& a) {
    RunConfig rc;
    if (a.preset == "paper") rc.model = ModelConfig::paper();
    if (!a.config.empty()) {
        for (const auto& [k, v] : text::parse_key_values(read_text(a.config))) rc.set(k, v);
    }
    auto set_if = [&](const char* key, const std::string& v) {
        if (!v.empty()) rc.set(key, v);
    };
    set_if("data", a.data);
    set_if("out", a.out);
    set_if("run_name", a.run_name);
    set_if("lambda_c", a.lambda_c);
    set_if("lambda_f", a.lambda_f);
    set_if("steps", a.recurrence);
    set_if("max_epochs", a.epochs);
    set_if("lr", a.lr);
    set_if("train_seed", a.seed);
    set_if("seed", a.seed);
    if (a.no_r2jump) rc.model.use_r2jump = false;
    if (a.no_inception) rc.model.use_inception = false;
    if (a.no_mcskip) rc.model.use_mcskip = false;
    if (a.no_scse) rc.model.use_scse = false;
    if (a.no_augment) rc.train.augment = false;
    if (a.dropout_after_scse) rc.model.dropout_after_scse = true;
    rc.validate();
    return rc;
}

void require_size(const std::vector<SegmentationSample>& samples, std::size_t size) {
    for (const auto& s : samples) {
        if (s.image.dims().h != size || s.image.dims().w != size) {
            throw DataError(s.id + ": image is " + std::to_string(s.image.dims().h) + "x" +
                            std::to_string(s.image.dims().w) + ", model expects " + std::to_string(size));
        }
    }
}

int train_cmd(const TrainArgs& a) {
    RunConfig rc = resolve(a);
    const auto train_set = load_dataset_split(rc.data, Split::train);
    const auto val_set = load_dataset_split(rc.data, Split::val);
    require_size(train_set, rc.model.input_size);
    require_size(val_set, rc.model.input_size);

    const fs::path dir = make_run_dir(rc.out, rc.run_name);
    rc.run_name = dir.filename().string();
    write_text(dir / "config.txt", rc.to_text());

    Model<float> model(rc.model);
    std::printf("run %s: %zu parameters, %zu train / %zu val samples\n", dir.string().c_str(), model.count_parameters(),
                train_set.size(), val_set.size());
    std::vector<EpochRecord> history;
    const auto t0 = std::chrono::steady_clock::now();
    TrainResult result;
    try {
        result = train(model, train_set, val_set, rc.train, [&](const EpochRecord& e, const PlateauTracker& plateau) {
            history.push_back(e);
            write_text(dir / "history.csv", history_to_csv(history));
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("epoch %3zu  train %.6f  val %.6f  lr %.3g%s  %.0fs\n", e.epoch, e.train_loss, e.val_loss, e.lr,
                        plateau.epochs_since_best() == 0 ? "  *" : "", secs);
            std::fflush(stdout);
        });
    } catch (const NonFiniteLoss& e) {
        throw CheckFailed(e.what());
    }

    save_checkpoint(dir / "final.ckpt", Checkpoint::capture(model, &result.adam, result.history));
    restore_snapshot(model, result.best);
    save_checkpoint(dir / "best.ckpt", Checkpoint::capture(model, nullptr, result.history));
    write_text(dir / "history.csv", history_to_csv(result.history));
    std::printf("best epoch %zu (val %.6f)%s; wrote %s\n", result.best_epoch, result.best_val_loss,
                result.early_stopped ? ", stopped early" : "", dir.string().c_str());
    return kOk;
}

// ---- eval ----

struct EvalArgs {
    std::string checkpoint, data, split = "test", out, dump;
    bool no_postprocess = false;
};

std::string summary_table(const MetricsReport& report) {
    std::ostringstream os;
    char line[160];
    std::snprintf(line, sizeof line, "%-14s %5s %8s %8s %8s %8s\n", "view", "n", "iou", "dice", "asd", "hd95");
    os << line;
    for (const auto& s : report.summaries()) {
        std::snprintf(line, sizeof line, "%-14s %5zu %8.4f %8.4f %8.3f %8.3f%s\n", s.view.c_str(), s.count, s.iou,
                      s.dice, s.asd, s.hd95,
                      s.undefined_distances ? ("  (" + std::to_string(s.undefined_distances) + " empty)").c_str() : "");
        os << line;
    }
    return os.str();
}

int eval_cmd(const EvalArgs& a) {
    const Checkpoint ckpt = load_ckpt(a.checkpoint);
    const Model<float> model = ckpt.restore();
    const auto samples = load_dataset_split(a.data, parse_split(a.split));
    require_size(samples, model.config().input_size);

    PredictionSink sink;
    if (!a.dump.empty()) {
        fs::create_directories(a.dump);
        sink = [&](const SegmentationSample& s, const Tensor<float>& prob, const BinaryMask& mask) {
            const std::string stem = s.id + "_" + std::string(view_name(s.view));
            write_pgm_image(fs::path(a.dump) / (stem + "_prob.pgm"), prob);
            write_pgm_mask(fs::path(a.dump) / (stem + "_mask.pgm"), mask);
        };
    }
    EvalOptions opts;
    opts.postprocess = !a.no_postprocess;
    const MetricsReport report = evaluate_dataset(model, samples, opts, sink);
    if (a.out.empty()) {
        std::fputs(report.to_csv().c_str(), stdout);
    } else {
        write_text(a.out, report.to_csv());
        std::fputs(summary_table(report).c_str(), stdout);
    }
    return kOk;
}

// ---- predict ----

struct PredictArgs {
    std::string checkpoint, image, out = ".";
};

int predict_cmd(const PredictArgs& a) {
    const Checkpoint ckpt = load_ckpt(a.checkpoint);
    const Model<float> model = ckpt.restore();
    const std::size_t size = model.config().input_size;
    Tensor<float> image = load(a.image, [&] { return minmax_normalize(read_pgm_image(a.image)); });
    if (image.dims().h != size || image.dims().w != size) image = resize_with_pad(image, size);

    const Tensor<float> prob = predict_probability(model, image);
    const BinaryMask mask = postprocess_pipeline(prob);
    std::error_code ec;
    fs::create_directories(a.out, ec);
    if (ec) throw DataError("cannot create " + a.out + ": " + ec.message());
    const std::string stem = fs::path(a.image).stem().string();
    const fs::path prob_path = fs::path(a.out) / (stem + "_prob.pgm");
    const fs::path mask_path = fs::path(a.out) / (stem + "_mask.pgm");
    write_pgm_image(prob_path, prob);
    write_pgm_mask(mask_path, mask);
    std::printf("wrote %s and %s (%zux%zu, foreground %zu px)\n", prob_path.string().c_str(),
                mask_path.string().c_str(), size, size, mask.count());
    return kOk;
}

// ---- gradcheck ----

struct GradArgs {
    std::string preset = "desk", filter;
    double tol = 0.0, block_tol = 0.0;
    std::size_t samples = 50, size = 16;
    int precision = 32;
    std::uint64_t seed = 1;
    bool inject_bug = false;
};

int gradcheck_cmd(const GradArgs& a) {
    const CheckPrecision p = a.precision == 64 ? CheckPrecision::f64 : CheckPrecision::f32;
    GradSuiteOptions opts = GradSuiteOptions::defaults(p);
    opts.model = a.preset == "paper" ? ModelConfig::paper() : ModelConfig::desk();
    if (a.tol > 0.0) opts.e2e_tol = a.tol;
    if (a.block_tol > 0.0) opts.block_tol = a.block_tol;
    opts.samples = a.samples;
    opts.e2e_size = a.size;
    opts.seed = a.seed;
    opts.filter = a.filter;
    opts.inject_bug = a.inject_bug;

    std::size_t failed = 0, total = 0;
    const auto t0 = std::chrono::steady_clock::now();
    run_gradient_suite(opts, [&](const GradSuiteResult& r) {
        ++total;
        if (!r.report.passed) ++failed;
        std::printf("%-20s %s  rel %.3e  tol %.0e  checked %zu  skipped %zu  worst %s\n", r.name.c_str(),
                    r.report.passed ? "PASS" : "FAIL", r.report.max_rel_error, r.tol, r.report.checked,
                    r.report.skipped, r.report.worst_coordinate.c_str());
        std::fflush(stdout);
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%zu/%zu checks passed (%d-bit, %s preset, end-to-end at %zux%zu, %.1fs)\n", total - failed, total,
                a.precision, a.preset.c_str(), a.size, a.size, secs);
    std::fflush(stdout);
    if (total == 0) throw UsageError("--filter matched no check");
    if (failed > 0) throw CheckFailed(std::to_string(failed) + " gradient check(s) failed");
    return kOk;
}

// ---- bench ----

struct BenchArgs {
    std::string checkpoint, preset = "desk";
    std::size_t size = 0, iters = 20, warmup = 5;
};

int bench_cmd(const BenchArgs& a) {
    if (a.iters < 2) throw UsageError("--iters must be at least 2");
    std::optional<Checkpoint> ckpt;
    ModelConfig cfg = a.preset == "paper" ? ModelConfig::paper() : ModelConfig::desk();
    if (!a.checkpoint.empty()) {
        ckpt = load_ckpt(a.checkpoint);
        cfg = ckpt->config;
    }
    if (a.size > 0) cfg.input_size = a.size;
    cfg.validate();
    Model<float> model(cfg);
    if (ckpt) {
        // Weights do not depend on the input size, so they carry over to any valid size.
        const auto& entries = model.params().entries();
        if (entries.size() != ckpt->tensors.size()) throw DataError("checkpoint does not match its own config");
        for (std::size_t i = 0; i < entries.size(); ++i) {
            auto dst = entries[i].value->data();
            const auto& src = ckpt->tensors[i].values;
            if (entries[i].name != ckpt->tensors[i].name || dst.size() != src.size())
                throw DataError("checkpoint tensor mismatch at " + ckpt->tensors[i].name);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }

    const std::size_t n = cfg.input_size;
    Tensor<float> image(Dims{1, 1, n, n});
    if (n >= 32 && (n & (n - 1)) == 0) {
        image = generate_sample(1, View::coronal, n, Quality::high).image;
    } else {
        std::mt19937_64 rng(1);
        std::uniform_real_distribution<float> u(0.0f, 1.0f);
        for (auto& v : image.data()) v = u(rng);
    }
    auto run_once = [&] {
        const auto t = std::chrono::steady_clock::now();
        (void)predict_probability(model, image);
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t).count();
    };
    for (std::size_t i = 0; i < a.warmup; ++i) run_once();
    std::vector<double> ms(a.iters);
    for (auto& m : ms) m = run_once();
    const double mean = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
    double var = 0.0;
    for (double m : ms) var += (m - mean) * (m - mean);
    const double sd = std::sqrt(var / static_cast<double>(ms.size() - 1));

    std::printf("parameters   %zu\n", model.count_parameters());
    std::printf("input        %zux%zu\n", n, n);
    std::printf("latency_ms   mean %.3f  sd %.3f  cv %.3f  (%zu runs after %zu warmup)\n", mean, sd, sd / mean, a.iters,
                a.warmup);
    if (cfg.channels == ModelConfig::paper().channels)
        std::printf("reference    16.5M parameters reported for the full-size network (documentation only)\n");
    return kOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"Coarse-to-fine spine segmentation: data synthesis, training, evaluation and checks", "r2mf"};
    app.require_subcommand(1);

    SynthArgs sa;
    auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic radiograph dataset");
    synth_cmd->add_option("--out", sa.out, "Dataset root")->required();
    synth_cmd->add_option("--per-view", sa.per_view, "Training ids per view (val/test get a quarter each)")
        ->capture_default_str();
    synth_cmd->add_option("--size", sa.size, "Image side, a power of two >= 32")->capture_default_str();
    synth_cmd->add_option("--seed", sa.seed, "Dataset seed")->capture_default_str();
    synth_cmd->add_option("--quality-mix", sa.quality_mix, "high|medium|low or three weights h,m,l")
        ->capture_default_str();

    TrainArgs ta;
    auto* train_sub = app.add_subcommand("train", "Train a model; writes best/final checkpoints and history.csv");
    train_sub->add_option("--config", ta.config, "key=value config file (flags override it)");
    train_sub->add_option("--preset", ta.preset, "Base model preset")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    train_sub->add_option("--data", ta.data, "Dataset root");
    train_sub->add_option("--out", ta.out, "Directory that receives the run directory");
    train_sub->add_option("--run-name", ta.run_name, "Run directory name (default: timestamp)");
    train_sub->add_flag("--no-r2jump", ta.no_r2jump, "Plain skip connections");
    train_sub->add_flag("--no-inception", ta.no_inception, "Double 3x3 conv blocks instead of Inception-R");
    train_sub->add_flag("--no-mcskip", ta.no_mcskip, "No cross-stage skips into the fine encoder");
    train_sub->add_flag("--no-scse", ta.no_scse, "No bottleneck attention");
    train_sub->add_option("--lambda-c", ta.lambda_c, "Coarse loss weight");
    train_sub->add_option("--lambda-f", ta.lambda_f, "Fine loss weight");
    train_sub->add_option("--recurrence", ta.recurrence, "Recurrent steps per level, finest first (e.g. 4,3,2,1)");
    train_sub->add_option("--epochs", ta.epochs, "Maximum epochs");
    train_sub->add_option("--lr", ta.lr, "Initial learning rate");
    train_sub->add_option("--seed", ta.seed, "Initialization and training seed");
    train_sub->add_flag("--no-augment", ta.no_augment, "Disable training augmentation");
    train_sub->add_flag("--dropout-after-scse", ta.dropout_after_scse, "Apply bottleneck dropout after attention");

    EvalArgs ea;
    auto* eval_sub = app.add_subcommand("eval", "Score a checkpoint on a dataset split");
    eval_sub->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    eval_sub->add_option("--data", ea.data, "Dataset root")->required();
    eval_sub->add_option("--split", ea.split, "Split to score")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    eval_sub->add_flag("--no-postprocess", ea.no_postprocess, "Threshold only, no component filter or closing");
    eval_sub->add_option("--out", ea.out, "Write the metrics CSV here and print a summary");
    eval_sub->add_option("--dump", ea.dump, "Directory for per-sample probability and mask PGMs");

    PredictArgs pa;
    auto* predict_sub = app.add_subcommand("predict", "Segment one PGM image");
    predict_sub->add_option("--checkpoint", pa.checkpoint, "Checkpoint file")->required();
    predict_sub->add_option("--image", pa.image, "Input P5 PGM (resized with padding to the model size)")->required();
    predict_sub->add_option("--out", pa.out, "Output directory")->capture_default_str();

    GradArgs ga;
    auto* grad_sub = app.add_subcommand("gradcheck", "Compare tape gradients with finite differences");
    grad_sub->add_option("--preset", ga.preset, "Architecture of the end-to-end check")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    grad_sub->add_option("--tol", ga.tol, "End-to-end tolerance (default 1e-2 at 32-bit, 1e-4 at 64-bit)");
    grad_sub->add_option("--block-tol", ga.block_tol, "Per-block tolerance (default 1e-3 at 32-bit, 1e-4 at 64-bit)");
    grad_sub->add_option("--samples", ga.samples, "Coordinates per check")->capture_default_str();
    grad_sub->add_option("--precision", ga.precision, "Tape precision")
        ->check(CLI::IsMember({32, 64}))
        ->capture_default_str();
    grad_sub->add_option("--size", ga.size, "Input side of the end-to-end check")->capture_default_str();
    grad_sub->add_option("--seed", ga.seed, "Probe seed")->capture_default_str();
    grad_sub->add_option("--filter", ga.filter, "Only checks whose name contains this text");
    grad_sub->add_flag("--inject-bug", ga.inject_bug, "Corrupt convolution weight gradients (negative control)");

    BenchArgs ba;
    auto* bench_sub = app.add_subcommand("bench", "Forward latency and parameter count");
    bench_sub->add_option("--checkpoint", ba.checkpoint, "Checkpoint file (default: fresh preset weights)");
    bench_sub->add_option("--preset", ba.preset, "Preset when no checkpoint is given")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    bench_sub->add_option("--size", ba.size, "Input side (default: the model's)");
    bench_sub->add_option("--iters", ba.iters, "Timed runs")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kOk : kUsage;
    }

    try {
        if (*synth_cmd) return synth(sa);
        if (*train_sub) return train_cmd(ta);
        if (*eval_sub) return eval_cmd(ea);
        if (*predict_sub) return predict_cmd(pa);
        if (*grad_sub) return gradcheck_cmd(ga);
        if (*bench_sub) return bench_cmd(ba);
    } catch (const CheckFailed& e) {
        std::fprintf(stderr, "r2mf: %s\n", e.what());
        return kCheckFailed;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "r2mf: %s\n", e.what());
        return kUsage;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "r2mf: %s\n", e.what());
        return kUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "r2mf: %s\n", e.what());
        return kDataError;
    }
    return kUsage;
}

int run(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    argv.reserve(args.size() + 1);
    argv.push_back("r2mf");
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace r2mf::cli
