#include "doctest.h"
#include "oracles.hpp"
#include "r2mf/postprocess.hpp"
#include "test_util.hpp"

using namespace r2mf;
using namespace r2mf::testing;

namespace {

BinaryMask from_rows(const std::vector<std::string>& rows) {
    BinaryMask m(rows.size(), rows[0].size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c) m.at(r, c) = rows[r][c] == '#';
    return m;
}

bool subset(const BinaryMask& a, const BinaryMask& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a.bits[i] && !b.bits[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("threshold convention") {
    const Dims d{1, 1, 3, 4};
    CHECK(threshold(Tensor<float>(d, 0.49f)).empty());
    CHECK(threshold(Tensor<float>(d, 0.5f)).count() == 12);
    auto p = random_const<double>(d, 3, 0.0, 1.0);
    const auto m = threshold(*p, 0.3);
    for (std::size_t i = 0; i < m.size(); ++i) CHECK(m.bits[i] == (p->data()[i] >= 0.3 ? 1 : 0));
    CHECK_THROWS_AS(threshold(Tensor<float>(Dims{1, 2, 3, 3})), std::invalid_argument);
}

TEST_CASE("largest component examples") {
    const auto m = from_rows({
        "##....#",
        "##...##",
        "#......",
        ".......",
    });
    const auto keep = largest_component(m);
    CHECK(keep == from_rows({
                      "##.....",
                      "##.....",
                      "#......",
                      ".......",
                  }));
    CHECK(largest_component(BinaryMask(4, 4)).empty());
    // Diagonal contact joins under 8-connectivity.
    CHECK(largest_component(from_rows({"#..", ".#.", "..#"})).count() == 3);
    // Equal areas: the component met first in row-major order wins.
    CHECK(largest_component(from_rows({"...##", "#....", "#...."})) == from_rows({"...##", ".....", "....."}));
}

TEST_CASE("largest component equals the flood-fill oracle") {
    std::mt19937_64 rng(4);
    for (int k = 0; k < 100; ++k) {
        const auto m = k % 2 ? random_noise_mask(24, 24, rng, 0.2 + 0.004 * k) : random_blob(24, 24, rng, 4);
        const auto got = largest_component(m);
        CHECK(got == flood_fill_largest(m));
        CHECK(got.count() <= m.count());
    }
}

TEST_CASE("closing examples and identities") {
    auto sq = from_rows({
        ".......",
        ".#####.",
        ".#####.",
        ".##.##.",
        ".#####.",
        ".#####.",
        ".......",
    });
    auto filled = sq;
    filled.at(3, 3) = 1;
    CHECK(closing(sq) == filled);
    CHECK(closing(BinaryMask(5, 5)).empty());
    // A band touching the image border keeps its border rows.
    const auto band = from_rows({"..##..", "..##..", "..##..", "..##.."});
    CHECK(closing(band) == band);
    CHECK(erode3x3(band).empty());
    CHECK(dilate3x3(band).count() == 16);
    // Gaps up to two pixels close; three stay open.
    CHECK(closing(from_rows({"#...#"})) == from_rows({"#...#"}));
    CHECK(closing(from_rows({"#...#"})) == from_rows({"#...#"}));

    std::mt19937_64 rng(5);
    for (int k = 0; k < 100; ++k) {
        const auto m = k % 2 ? random_noise_mask(20, 20, rng, 0.3) : random_blob(20, 20, rng);
        const auto c = closing(m);
        CHECK(closing(c) == c);
        CHECK(subset(m, c));
        CHECK(count_components(c) <= count_components(m));
    }
}

TEST_CASE("pipeline keeps one component") {
    const Dims d{1, 1, 16, 16};
    Tensor<float> p(d, 0.1f);
    for (std::size_t r = 2; r < 14; ++r)
        for (std::size_t c = 5; c < 9; ++c) p.at(0, 0, r, c) = 0.9f;
    p.at(0, 0, 7, 7) = 0.2f;   // hole
    p.at(0, 0, 1, 14) = 0.8f;  // speckle
    const auto out = postprocess_pipeline(p);
    CHECK(out.count() == 48);
    CHECK_FALSE(out.at(1, 14));
    CHECK(out.at(7, 7));

    Tensor<float> tidy(d, 0.0f);
    for (std::size_t r = 2; r < 14; ++r)
        for (std::size_t c = 5; c < 9; ++c) tidy.at(0, 0, r, c) = 1.0f;
    CHECK(postprocess_pipeline(tidy) == threshold(tidy));

    std::mt19937_64 rng(6);
    for (int k = 0; k < 100; ++k) {
        auto q = random_const<float>(d, 100 + k, 0.0, 1.0);
        CHECK(count_components(postprocess_pipeline(*q)) <= 1);
    }
}
