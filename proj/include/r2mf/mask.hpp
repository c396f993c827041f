#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace r2mf {

/// Row-major h x w grid of {0, 1} values.
struct BinaryMask {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> bits;

    BinaryMask() = default;
    BinaryMask(std::size_t height, std::size_t width) : h(height), w(width), bits(height * width, 0) {}

    std::size_t size() const noexcept { return bits.size(); }
    std::uint8_t& at(std::size_t r, std::size_t c) { return bits[r * w + c]; }
    std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * w + c]; }
    std::size_t count() const noexcept;
    bool empty() const noexcept { return count() == 0; }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

inline std::size_t BinaryMask::count() const noexcept {
    std::size_t n = 0;
    for (auto b : bits) n += b;
    return n;
}

}  // namespace r2mf
