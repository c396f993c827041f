#include "r2mf/pgm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>

namespace r2mf {

namespace {

class HeaderReader {
   public:
    HeaderReader(const std::string& bytes, const std::filesystem::path& path) : s_(bytes), path_(path.string()) {}

    std::size_t number(const char* what) {
        skip_space_and_comments();
        std::size_t v = 0, digits = 0;
        while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(s_[pos_++] - '0');
            if (++digits > 9) fail(std::string(what) + " is too large");
        }
        if (digits == 0) fail(std::string("missing ") + what);
        return v;
    }

    // Exactly one whitespace byte separates maxval from the raster.
    std::size_t raster_start() {
        if (pos_ >= s_.size() || !std::isspace(static_cast<unsigned char>(s_[pos_]))) fail("malformed header");
        return pos_ + 1;
    }

    [[noreturn]] void fail(const std::string& msg) const { throw FormatError(path_ + ": " + msg); }

   private:
    void skip_space_and_comments() {
        while (pos_ < s_.size()) {
            if (std::isspace(static_cast<unsigned char>(s_[pos_]))) {
                ++pos_;
            } else if (s_[pos_] == '#') {
                while (pos_ < s_.size() && s_[pos_] != '\n') ++pos_;
            } else {
                break;
            }
        }
    }

    const std::string& s_;
    std::string path_;
    std::size_t pos_ = 2;
};

std::uint8_t quantize(float v) {
    const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

}  // namespace

GrayImage read_pgm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    HeaderReader hdr(bytes, path);
    if (bytes.size() < 2 || bytes[0] != 'P') hdr.fail("not a PGM file");
    if (bytes[1] != '5') hdr.fail(std::string("unsupported PGM variant P") + bytes[1] + " (only binary P5)");
    GrayImage img;
    img.w = hdr.number("width");
    img.h = hdr.number("height");
    const std::size_t maxval = hdr.number("maxval");
    if (img.w == 0 || img.h == 0) hdr.fail("empty raster");
    if (maxval != 255) hdr.fail("maxval " + std::to_string(maxval) + " (only 255 is supported)");
    const std::size_t start = hdr.raster_start();
    const std::size_t need = img.w * img.h;
    if (bytes.size() - std::min(start, bytes.size()) < need) hdr.fail("truncated raster");
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(start),
                      bytes.begin() + static_cast<std::ptrdiff_t>(start + need));
    return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
    if (img.pixels.size() != img.h * img.w) throw std::invalid_argument("write_pgm: pixel count does not match size");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << img.w << ' ' << img.h << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

Tensor<float> read_pgm_image(const std::filesystem::path& path) {
    const auto img = read_pgm(path);
    Tensor<float> t(Dims{1, 1, img.h, img.w});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) t.data()[i] = static_cast<float>(img.pixels[i] / 255.0);
    return t;
}

void write_pgm_image(const std::filesystem::path& path, const Tensor<float>& image) {
    const Dims d = image.dims();
    if (d.n != 1 || d.c != 1) throw std::invalid_argument("write_pgm_image: expected (1,1,H,W), got " + to_string(d));
    GrayImage img{d.h, d.w, std::vector<std::uint8_t>(d.plane())};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = quantize(image.data()[i]);
    write_pgm(path, img);
}

BinaryMask read_pgm_mask(const std::filesystem::path& path) {
    const auto img = read_pgm(path);
    BinaryMask m(img.h, img.w);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const auto v = img.pixels[i];
        if (v != 0 && v != 255) throw FormatError(path.string() + ": mask value " + std::to_string(v));
        m.bits[i] = v == 255;
    }
    return m;
}

void write_pgm_mask(const std::filesystem::path& path, const BinaryMask& mask) {
    GrayImage img{mask.h, mask.w, std::vector<std::uint8_t>(mask.size())};
    for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask.bits[i] ? 255 : 0;
    write_pgm(path, img);
}

}  // namespace r2mf
