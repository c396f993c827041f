#include "r2mf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>

namespace r2mf {

namespace {

void check_same(const BinaryMask& a, const BinaryMask& b, const char* who) {
    if (a.h != b.h || a.w != b.w) {
        throw std::invalid_argument(std::string(who) + ": mask sizes differ (" + std::to_string(a.h) + "x" +
                                    std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" + std::to_string(b.w) +
                                    ")");
    }
}

struct Overlap {
    std::size_t inter = 0, p = 0, t = 0;
};

Overlap overlap(const BinaryMask& p, const BinaryMask& t) {
    Overlap o;
    for (std::size_t i = 0; i < p.size(); ++i) {
        o.inter += p.bits[i] & t.bits[i];
        o.p += p.bits[i];
        o.t += t.bits[i];
    }
    return o;
}

// Lower envelope of parabolas (q - v)^2 + f(v) over the finite sites of f.
void envelope_1d(const double* f, std::size_t n, std::size_t stride, double* out, std::vector<int>& v,
                 std::vector<double>& z) {
    const double inf = std::numeric_limits<double>::infinity();
    int k = -1;
    for (std::size_t q = 0; q < n; ++q) {
        const double fq = f[q * stride];
        if (fq == inf) continue;
        const double qd = static_cast<double>(q);
        double s = -inf;
        while (k >= 0) {
            const double p = v[k];
            s = ((fq + qd * qd) - (f[v[k] * stride] + p * p)) / (2.0 * qd - 2.0 * p);
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = static_cast<int>(q);
        z[k] = k == 0 ? -inf : s;
        z[k + 1] = inf;
    }
    if (k < 0) {
        for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
        return;
    }
    int j = 0;
    for (std::size_t q = 0; q < n; ++q) {
        const double qd = static_cast<double>(q);
        while (z[j + 1] < qd) ++j;
        const double d = qd - v[j];
        out[q * stride] = d * d + f[v[j] * stride];
    }
}

}  // namespace

double iou(const BinaryMask& p, const BinaryMask& t) {
    check_same(p, t, "iou");
    const auto o = overlap(p, t);
    const std::size_t uni = o.p + o.t - o.inter;
    return uni == 0 ? 1.0 : static_cast<double>(o.inter) / static_cast<double>(uni);
}

double dice_coef(const BinaryMask& p, const BinaryMask& t) {
    check_same(p, t, "dice_coef");
    const auto o = overlap(p, t);
    return o.p + o.t == 0 ? 1.0 : 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.p + o.t);
}

std::vector<Point> extract_boundary(const BinaryMask& m) {
    std::vector<Point> out;
    const auto h = static_cast<long>(m.h), w = static_cast<long>(m.w);
    auto background = [&](long r, long c) { return r < 0 || c < 0 || r >= h || c >= w || !m.at(r, c); };
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            if (!m.at(r, c)) continue;
            if (background(r - 1, c) || background(r + 1, c) || background(r, c - 1) || background(r, c + 1)) {
                out.push_back({static_cast<int>(r), static_cast<int>(c)});
            }
        }
    return out;
}

std::vector<double> squared_distance_transform(const BinaryMask& sites) {
    const std::size_t h = sites.h, w = sites.w;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> f(h * w), g(h * w);
    for (std::size_t i = 0; i < h * w; ++i) f[i] = sites.bits[i] ? 0.0 : inf;
    std::vector<int> v(std::max(h, w));
    std::vector<double> z(std::max(h, w) + 1);
    for (std::size_t c = 0; c < w; ++c) envelope_1d(f.data() + c, h, w, g.data() + c, v, z);
    for (std::size_t r = 0; r < h; ++r) envelope_1d(g.data() + r * w, w, 1, f.data() + r * w, v, z);
    return f;
}

std::vector<double> surface_distances(const BinaryMask& p, const BinaryMask& t) {
    check_same(p, t, "surface distance");
    if (p.empty() || t.empty()) throw UndefinedMetric("surface distance is undefined for an empty mask");
    const auto bp = extract_boundary(p), bt = extract_boundary(t);
    auto as_mask = [&](const std::vector<Point>& pts) {
        BinaryMask m(p.h, p.w);
        for (const auto& q : pts) m.at(q.r, q.c) = 1;
        return m;
    };
    const auto to_t = squared_distance_transform(as_mask(bt));
    const auto to_p = squared_distance_transform(as_mask(bp));
    std::vector<double> d;
    d.reserve(bp.size() + bt.size());
    for (const auto& q : bp) d.push_back(std::sqrt(to_t[q.r * p.w + q.c]));
    for (const auto& q : bt) d.push_back(std::sqrt(to_p[q.r * p.w + q.c]));
    return d;
}

double asd(const BinaryMask& p, const BinaryMask& t) {
    const auto d = surface_distances(p, t);
    double s = 0.0;
    for (double x : d) s += x;
    return s / static_cast<double>(d.size());
}

double hd95(const BinaryMask& p, const BinaryMask& t) { return percentile_linear(surface_distances(p, t), 0.95); }

double percentile_linear(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty sample");
    if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile rank must lie in [0, 1]");
    std::sort(values.begin(), values.end());
    const double pos = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

void MetricsReport::sort() {
    std::stable_sort(records_.begin(), records_.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
        return a.id != b.id ? a.id < b.id : a.view < b.view;
    });
}

std::vector<MetricsSummary> MetricsReport::summaries() const {
    std::map<std::string, std::vector<const MetricsRecord*>> groups;
    for (const auto& r : records_) groups[r.view].push_back(&r);
    auto reduce = [](const std::string& view, const std::vector<const MetricsRecord*>& rs) {
        MetricsSummary s;
        s.view = view;
        s.count = rs.size();
        std::size_t defined = 0;
        for (const auto* r : rs) {
            s.iou += r->iou;
            s.dice += r->dice;
            if (std::isnan(r->asd) || std::isnan(r->hd95)) {
                ++s.undefined_distances;
                continue;
            }
            s.asd += r->asd;
            s.hd95 += r->hd95;
            ++defined;
        }
        const double n = static_cast<double>(rs.size());
        s.iou /= n;
        s.dice /= n;
        const double nan = std::numeric_limits<double>::quiet_NaN();
        s.asd = defined ? s.asd / static_cast<double>(defined) : nan;
        s.hd95 = defined ? s.hd95 / static_cast<double>(defined) : nan;
        return s;
    };
    std::vector<MetricsSummary> out;
    if (records_.empty()) return out;
    std::vector<const MetricsRecord*> all;
    for (const auto& [view, rs] : groups) {
        out.push_back(reduce(view, rs));
        all.insert(all.end(), rs.begin(), rs.end());
    }
    out.push_back(reduce("all", all));
    return out;
}

std::optional<MetricsSummary> MetricsReport::summary(const std::string& view) const {
    for (auto& s : summaries()) {
        if (s.view == view) return s;
    }
    return std::nullopt;
}

std::string MetricsReport::to_csv() const {
    auto num = [](double v) {
        if (std::isnan(v)) return std::string("nan");
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.6f", v);
        return std::string(buf);
    };
    std::ostringstream os;
    os << "id,view,iou,dice,asd,hd95\n";
    for (const auto& r : records_) {
        os << r.id << ',' << r.view << ',' << num(r.iou) << ',' << num(r.dice) << ',' << num(r.asd) << ','
           << num(r.hd95) << '\n';
    }
    for (const auto& s : summaries()) {
        os << "# mean," << s.view << ',' << num(s.iou) << ',' << num(s.dice) << ',' << num(s.asd) << ','
           << num(s.hd95) << '\n';
    }
    return os.str();
}

}  // namespace r2mf
