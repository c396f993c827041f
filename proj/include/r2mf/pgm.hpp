#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "r2mf/mask.hpp"
#include "r2mf/tensor.hpp"

namespace r2mf {

/// Malformed or unsupported file content.
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

struct GrayImage {
    std::size_t h = 0, w = 0;
    std::vector<std::uint8_t> pixels;
};

/// Binary (P5) PGM with maxval 255 only.
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& img);

/// Values are clamped to [0,1] and stored as round(255 v); reading divides by 255.
/// The tensor form is (1,1,H,W).
Tensor<float> read_pgm_image(const std::filesystem::path& path);
void write_pgm_image(const std::filesystem::path& path, const Tensor<float>& image);

/// Masks are stored as {0,255}; any other stored value is a format error.
BinaryMask read_pgm_mask(const std::filesystem::path& path);
void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask);

}  // namespace r2mf
