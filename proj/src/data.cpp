#include "r2mf/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "r2mf/pgm.hpp"
#include "r2mf/text.hpp"

namespace r2mf {

namespace {

constexpr std::array<std::string_view, 3> kViewNames{"coronal", "left-bending", "right-bending"};
constexpr std::array<std::string_view, 3> kQualityNames{"high", "medium", "low"};
constexpr std::array<std::string_view, 3> kSplitNames{"train", "val", "test"};

template <typename E>
E parse_enum(std::string_view s, const std::array<std::string_view, 3>& names, const char* what) {
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == s) return static_cast<E>(i);
    throw std::invalid_argument(std::string("unknown ") + what + " '" + std::string(s) + "'");
}

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

void check_size(std::size_t size) {
    if (size < 32 || (size & (size - 1)) != 0)
        throw std::invalid_argument("sample size must be a power of two >= 32, got " + std::to_string(size));
}

// Separable Gaussian blur with edge clamping.
void blur(std::vector<double>& img, std::size_t s, double sigma) {
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& v : k) v /= total;
    const int n = static_cast<int>(s);
    std::vector<double> tmp(img.size());
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * img[r * n + std::clamp(c + i, 0, n - 1)];
            tmp[r * n + c] = acc;
        }
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(r + i, 0, n - 1) * n + c];
            img[r * n + c] = acc;
        }
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::filesystem::path sample_stem(const std::filesystem::path& root, const ManifestRow& row) {
    return root / split_name(row.split) / (row.id + "_" + std::string(view_name(row.view)));
}

}  // namespace

std::string_view view_name(View v) { return kViewNames[static_cast<std::size_t>(v)]; }
std::string_view quality_name(Quality q) { return kQualityNames[static_cast<std::size_t>(q)]; }
std::string_view split_name(Split s) { return kSplitNames[static_cast<std::size_t>(s)]; }
View parse_view(std::string_view s) { return parse_enum<View>(s, kViewNames, "view"); }
Quality parse_quality(std::string_view s) { return parse_enum<Quality>(s, kQualityNames, "quality"); }
Split parse_split(std::string_view s) { return parse_enum<Split>(s, kSplitNames, "split"); }

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return splitmix64(a ^ splitmix64(b)); }

QualityProfile quality_profile(Quality q) {
    switch (q) {
        case Quality::high: return {0.02, 0.5, 2};
        case Quality::medium: return {0.04, 0.35, 4};
        case Quality::low: return {0.07, 0.25, 6};
    }
    throw std::invalid_argument("quality_profile: bad tier");
}

SpineGeometry spine_geometry(std::uint64_t seed, View view, std::size_t size) {
    check_size(size);
    const double s = static_cast<double>(size);
    constexpr double pi = std::numbers::pi;

    std::mt19937_64 patient(mix_seed(seed, 0));
    const double hw_base = uniform(patient, 0.05, 0.065);
    const double hw_amp = uniform(patient, 0.005, 0.015);
    const double hw_freq = uniform(patient, 0.5, 1.5);
    const double hw_phase = uniform(patient, 0.0, 2.0 * pi);

    std::mt19937_64 rng(mix_seed(seed, 1 + static_cast<std::uint64_t>(view)));
    double amp = 0.0, second = 0.0;
    switch (view) {
        case View::coronal:
            amp = uniform(rng, -0.04, 0.04);
            second = uniform(rng, -0.04, 0.04);
            break;
        case View::left_bending: amp = -uniform(rng, 0.12, 0.2); break;
        case View::right_bending: amp = uniform(rng, 0.12, 0.2); break;
    }
    const double phase = uniform(rng, -0.25, 0.25);
    const double phase2 = uniform(rng, 0.0, 2.0 * pi);
    const double drift = uniform(rng, -0.03, 0.03);

    SpineGeometry g;
    g.center.resize(size);
    g.half_width.resize(size);
    for (std::size_t r = 0; r < size; ++r) {
        const double y = (static_cast<double>(r) + 0.5) / s;
        g.center[r] = s * (0.5 + amp * std::sin(pi * y + phase) + second * std::sin(2.0 * pi * y + phase2) +
                           drift * (y - 0.5));
        g.half_width[r] = s * (hw_base + hw_amp * std::sin(2.0 * pi * hw_freq * y + hw_phase));
    }
    return g;
}

SegmentationSample generate_sample(std::uint64_t seed, View view, std::size_t size, Quality quality) {
    const auto g = spine_geometry(seed, view, size);
    const auto prof = quality_profile(quality);
    const double s = static_cast<double>(size);
    constexpr double pi = std::numbers::pi;
    std::mt19937_64 rng(mix_seed(seed, 100 + static_cast<std::uint64_t>(view)));

    const double gx = uniform(rng, -0.15, 0.15), gy = uniform(rng, -0.15, 0.15);
    const double bump_amp = uniform(rng, 0.0, 0.05), bump_phase = uniform(rng, 0.0, 2.0 * pi);
    const double vert_period = s * uniform(rng, 0.08, 0.12), vert_phase = uniform(rng, 0.0, 2.0 * pi);

    struct Rib {
        double y0, curvature, sigma, intensity;
    };
    std::vector<Rib> ribs(prof.distractors);
    for (auto& rib : ribs) {
        rib.y0 = s * uniform(rng, 0.1, 0.9);
        rib.curvature = uniform(rng, 0.3, 0.8) / s;
        rib.sigma = uniform(rng, 0.8, 1.5);
        rib.intensity = 0.5 * prof.contrast * uniform(rng, 0.6, 1.0);
    }

    std::vector<double> img(size * size);
    SegmentationSample out;
    out.view = view;
    out.quality = quality;
    out.mask = BinaryMask(size, size);
    for (std::size_t r = 0; r < size; ++r) {
        const double y = static_cast<double>(r) + 0.5;
        const double vert = 1.0 + 0.15 * std::cos(2.0 * pi * y / vert_period + vert_phase);
        for (std::size_t c = 0; c < size; ++c) {
            const double x = static_cast<double>(c) + 0.5;
            const double dx = std::abs(x - g.center[r]);
            double v = 0.25 + gx * (x / s - 0.5) + gy * (y / s - 0.5) +
                       bump_amp * std::sin(2.0 * pi * (x + y) / s + bump_phase);
            v += prof.contrast * vert / (1.0 + std::exp(-(g.half_width[r] - dx) / 0.7));
            for (const auto& rib : ribs) {
                const double d = y - (rib.y0 + rib.curvature * (x - g.center[r]) * (x - g.center[r]));
                v += rib.intensity * std::exp(-0.5 * d * d / (rib.sigma * rib.sigma));
            }
            img[r * size + c] = v;
            out.mask.at(r, c) = dx <= g.half_width[r];
        }
    }
    blur(img, size, 0.8);
    std::normal_distribution<double> noise(0.0, prof.noise_sigma);
    for (auto& v : img) v += noise(rng);

    Tensor<float> raw(Dims{1, 1, size, size});
    for (std::size_t i = 0; i < img.size(); ++i) raw.data()[i] = static_cast<float>(img[i]);
    out.image = minmax_normalize(raw);
    return out;
}

QualityMix QualityMix::parse(std::string_view s) {
    s = text::trim(s);
    if (s == "high") return {1, 0, 0};
    if (s == "medium") return {0, 1, 0};
    if (s == "low") return {0, 0, 1};
    std::vector<double> w;
    while (true) {
        const auto comma = s.find(',');
        w.push_back(text::parse_double("quality_mix", s.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        s.remove_prefix(comma + 1);
    }
    if (w.size() != 3) throw std::invalid_argument("quality_mix: expected three weights");
    QualityMix m{w[0], w[1], w[2]};
    if (m.high < 0 || m.medium < 0 || m.low < 0 || m.high + m.medium + m.low <= 0)
        throw std::invalid_argument("quality_mix: weights must be non-negative with a positive sum");
    return m;
}

std::string QualityMix::to_string() const {
    return text::format_double(high) + "," + text::format_double(medium) + "," + text::format_double(low);
}

std::size_t holdout_count(std::size_t n_per_view) {
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n_per_view) / 4.0)));
}

Dataset generate_dataset(std::size_t n_per_view, std::size_t size, const QualityMix& mix, std::uint64_t seed) {
    if (n_per_view == 0) throw std::invalid_argument("generate_dataset: n_per_view must be at least 1");
    check_size(size);
    const std::size_t hold = holdout_count(n_per_view);
    const std::size_t ids = n_per_view + 2 * hold;
    const double total = mix.high + mix.medium + mix.low;
    Dataset ds;
    for (std::size_t i = 0; i < ids; ++i) {
        const std::uint64_t base = mix_seed(seed, i);
        std::mt19937_64 qrng(mix_seed(base, 0x51));
        const double u = uniform(qrng, 0.0, total);
        const Quality q = u < mix.high ? Quality::high : u < mix.high + mix.medium ? Quality::medium : Quality::low;
        const Split split = i < n_per_view ? Split::train : i < n_per_view + hold ? Split::val : Split::test;
        char id[32];
        std::snprintf(id, sizeof id, "s%04zu", i);
        for (View v : kViews) {
            ds.manifest.push_back(ManifestRow{id, v, split, q, base});
            auto sample = generate_sample(base, v, size, q);
            sample.id = id;
            ds.samples.push_back(std::move(sample));
        }
    }
    return ds;
}

std::string manifest_to_tsv(const std::vector<ManifestRow>& rows) {
    std::string out = "id\tview\tsplit\tquality\tseed\n";
    for (const auto& r : rows) {
        out += r.id + '\t' + std::string(view_name(r.view)) + '\t' + std::string(split_name(r.split)) + '\t' +
               std::string(quality_name(r.quality)) + '\t' + std::to_string(r.seed) + '\n';
    }
    return out;
}

std::vector<ManifestRow> manifest_from_tsv(std::string_view tsv) {
    std::vector<ManifestRow> rows;
    std::size_t line_no = 0;
    while (!tsv.empty()) {
        const auto nl = tsv.find('\n');
        const std::string_view line = tsv.substr(0, nl);
        tsv = nl == std::string_view::npos ? std::string_view{} : tsv.substr(nl + 1);
        ++line_no;
        if (text::trim(line).empty()) continue;
        std::vector<std::string_view> f;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            f.push_back(text::trim(line.substr(start, tab - start)));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        if (f.size() != 5) throw std::invalid_argument("manifest line " + std::to_string(line_no) + ": expected 5 fields");
        if (line_no == 1 && f[0] == "id") continue;
        rows.push_back(ManifestRow{std::string(f[0]), parse_view(f[1]), parse_split(f[2]), parse_quality(f[3]),
                                   text::parse_u64("seed", f[4])});
    }
    return rows;
}

void write_dataset(const std::filesystem::path& root, const Dataset& ds) {
    if (ds.manifest.size() != ds.samples.size()) throw std::invalid_argument("write_dataset: manifest/sample mismatch");
    for (Split s : {Split::train, Split::val, Split::test}) std::filesystem::create_directories(root / split_name(s));
    for (std::size_t i = 0; i < ds.samples.size(); ++i) {
        const auto stem = sample_stem(root, ds.manifest[i]);
        write_pgm_image(stem.string() + ".pgm", ds.samples[i].image);
        write_pgm_mask(stem.string() + "_mask.pgm", ds.samples[i].mask);
    }
    std::ofstream out(root / "manifest.tsv", std::ios::binary);
    out << manifest_to_tsv(ds.manifest);
    if (!out) throw std::runtime_error("cannot write " + (root / "manifest.tsv").string());
}

std::vector<SegmentationSample> load_split(const std::filesystem::path& root, Split split) {
    const auto rows = manifest_from_tsv(read_file(root / "manifest.tsv"));
    std::vector<SegmentationSample> out;
    for (const auto& row : rows) {
        if (row.split != split) continue;
        const auto stem = sample_stem(root, row);
        SegmentationSample s;
        s.id = row.id;
        s.view = row.view;
        s.quality = row.quality;
        s.image = read_pgm_image(stem.string() + ".pgm");
        s.mask = read_pgm_mask(stem.string() + "_mask.pgm");
        if (s.mask.h != s.image.dims().h || s.mask.w != s.image.dims().w)
            throw FormatError(stem.string() + ": image and mask sizes differ");
        out.push_back(std::move(s));
    }
    return out;
}

Tensor<float> minmax_normalize(const Tensor<float>& image) {
    if (image.size() == 0) throw std::invalid_argument("minmax_normalize: empty image");
    const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
    const double mn = *lo, mx = *hi;
    if (!(mx > mn)) throw std::invalid_argument("minmax_normalize: constant image");
    Tensor<float> out(image.dims());
    for (std::size_t i = 0; i < image.size(); ++i)
        out.data()[i] = static_cast<float>((static_cast<double>(image.data()[i]) - mn) / (mx - mn));
    return out;
}

Tensor<float> resize_with_pad(const Tensor<float>& image, std::size_t target) {
    const Dims d = image.dims();
    if (d.n != 1 || d.c != 1 || d.h == 0 || d.w == 0 || target == 0)
        throw std::invalid_argument("resize_with_pad: expected a non-empty (1,1,H,W) image");
    const double scale = static_cast<double>(target) / static_cast<double>(std::max(d.h, d.w));
    const auto nh = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(d.h * scale)), 1, target);
    const auto nw = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(d.w * scale)), 1, target);
    const std::size_t top = (target - nh) / 2, left = (target - nw) / 2;
    Tensor<float> out(Dims{1, 1, target, target});
    const double sy = static_cast<double>(d.h) / nh, sx = static_cast<double>(d.w) / nw;
    for (std::size_t r = 0; r < nh; ++r) {
        const double y = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(d.h - 1));
        const auto y0 = static_cast<std::size_t>(y);
        const std::size_t y1 = std::min(y0 + 1, d.h - 1);
        const double fy = y - y0;
        for (std::size_t c = 0; c < nw; ++c) {
            const double x = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(d.w - 1));
            const auto x0 = static_cast<std::size_t>(x);
            const std::size_t x1 = std::min(x0 + 1, d.w - 1);
            const double fx = x - x0;
            const double v = (1 - fy) * ((1 - fx) * image.at(0, 0, y0, x0) + fx * image.at(0, 0, y0, x1)) +
                             fy * ((1 - fx) * image.at(0, 0, y1, x0) + fx * image.at(0, 0, y1, x1));
            out.at(0, 0, top + r, left + c) = static_cast<float>(v);
        }
    }
    return out;
}

std::vector<std::size_t> balanced_batches(const std::vector<SegmentationSample>& samples, std::uint64_t seed,
                                          std::size_t epoch) {
    std::array<std::vector<std::size_t>, 3> by_view;
    for (std::size_t i = 0; i < samples.size(); ++i) by_view[static_cast<std::size_t>(samples[i].view)].push_back(i);
    std::size_t longest = 0;
    for (View v : kViews) {
        const auto& ids = by_view[static_cast<std::size_t>(v)];
        if (ids.empty()) throw std::invalid_argument("balanced_batches: no samples for view " + std::string(view_name(v)));
        longest = std::max(longest, ids.size());
    }
    std::mt19937_64 rng(mix_seed(seed, epoch));
    for (auto& ids : by_view) std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<std::size_t> order;
    order.reserve(3 * longest);
    for (std::size_t k = 0; k < longest; ++k)
        for (const auto& ids : by_view) order.push_back(ids[k % ids.size()]);
    return order;
}

}  // namespace r2mf
