#include "r2mf/postprocess.hpp"

#include <stdexcept>
#include <vector>

namespace r2mf {

template <typename T>
BinaryMask threshold(const Tensor<T>& prob, double t) {
    const Dims d = prob.dims();
    if (d.c != 1) throw std::invalid_argument("threshold: expected a single-channel map, got " + to_string(d));
    BinaryMask m(d.h, d.w);
    for (std::size_t i = 0; i < m.size(); ++i) m.bits[i] = static_cast<double>(prob.data()[i]) >= t;
    return m;
}

BinaryMask largest_component(const BinaryMask& mask) {
    const long h = static_cast<long>(mask.h), w = static_cast<long>(mask.w);
    std::vector<int> label(mask.size(), -1);
    std::vector<std::size_t> area;
    std::vector<long> queue;
    for (long start = 0; start < h * w; ++start) {
        if (!mask.bits[start] || label[start] >= 0) continue;
        const int id = static_cast<int>(area.size());
        queue.assign(1, start);
        label[start] = id;
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const long r = queue[head] / w, c = queue[head] % w;
            for (long dr = -1; dr <= 1; ++dr)
                for (long dc = -1; dc <= 1; ++dc) {
                    const long rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= h || cc >= w) continue;
                    const long k = rr * w + cc;
                    if (mask.bits[k] && label[k] < 0) {
                        label[k] = id;
                        queue.push_back(k);
                    }
                }
        }
        area.push_back(queue.size());
    }
    BinaryMask out(mask.h, mask.w);
    if (area.empty()) return out;
    int best = 0;
    for (int i = 1; i < static_cast<int>(area.size()); ++i)
        if (area[i] > area[best]) best = i;
    for (std::size_t k = 0; k < out.size(); ++k) out.bits[k] = label[k] == best;
    return out;
}

namespace {

// 3x3 window test with out-of-grid pixels as background; `any` selects dilation.
BinaryMask window3x3(const BinaryMask& m, bool any) {
    const long h = static_cast<long>(m.h), w = static_cast<long>(m.w);
    BinaryMask out(m.h, m.w);
    for (long r = 0; r < h; ++r)
        for (long c = 0; c < w; ++c) {
            bool hit = !any;
            for (long dr = -1; dr <= 1 && hit != any; ++dr)
                for (long dc = -1; dc <= 1; ++dc) {
                    const long rr = r + dr, cc = c + dc;
                    const bool v = rr >= 0 && cc >= 0 && rr < h && cc < w && m.at(rr, cc);
                    if (v == any) {
                        hit = any;
                        break;
                    }
                }
            out.at(r, c) = hit;
        }
    return out;
}

}  // namespace

BinaryMask dilate3x3(const BinaryMask& mask) { return window3x3(mask, true); }
BinaryMask erode3x3(const BinaryMask& mask) { return window3x3(mask, false); }
BinaryMask closing(const BinaryMask& mask) {
    BinaryMask padded(mask.h + 2, mask.w + 2);
    for (std::size_t r = 0; r < mask.h; ++r)
        for (std::size_t c = 0; c < mask.w; ++c) padded.at(r + 1, c + 1) = mask.at(r, c);
    const auto closed = erode3x3(dilate3x3(padded));
    BinaryMask out(mask.h, mask.w);
    for (std::size_t r = 0; r < mask.h; ++r)
        for (std::size_t c = 0; c < mask.w; ++c) out.at(r, c) = closed.at(r + 1, c + 1);
    return out;
}

template <typename T>
BinaryMask postprocess_pipeline(const Tensor<T>& prob, double t) {
    return closing(largest_component(threshold(prob, t)));
}

template BinaryMask threshold(const Tensor<float>&, double);
template BinaryMask threshold(const Tensor<double>&, double);
template BinaryMask postprocess_pipeline(const Tensor<float>&, double);
template BinaryMask postprocess_pipeline(const Tensor<double>&, double);

}  // namespace r2mf
