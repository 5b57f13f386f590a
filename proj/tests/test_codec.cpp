// The frozen codec must be numerically invertible: decode(encode(x)) == x to
// float precision, because the training losses treat its latents as exact.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "unitok/codec.hpp"
#include "unitok/metrics.hpp"

using namespace unitok;

namespace {

Tensor random_images(int n, int res, uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform({n, res, res, 3}, rng, -1.0f, 1.0f);
}

}  // namespace

TEST_CASE("round trip is lossless to 1e-5 over 100 random images") {
    CodecParams codec = make_codec(4, 1234);
    double worst = 0.0;
    for (int i = 0; i < 10; ++i) {
        Tensor x = random_images(10, 32, 100 + static_cast<uint64_t>(i));
        Tensor z = encode_image(x, codec);
        Tensor back = decode_latents(z, codec);
        REQUIRE(back.shape == x.shape);
        for (size_t j = 0; j < x.data.size(); ++j)
            worst = std::max(worst, std::abs(static_cast<double>(back.data[j] - x.data[j])));
    }
    CHECK(worst <= 1e-5);
}

TEST_CASE("round trip PSNR is at least 90 dB") {
    CodecParams codec = make_codec(4, 1234);
    Tensor x = random_images(8, 32, 7);
    Tensor back = decode_latents(encode_image(x, codec), codec);
    BatchStat s = psnr(x, back);
    CHECK(s.mean >= 90.0);
}

TEST_CASE("factor 8 maps 128x128x3 to a 16x16x192 grid") {
    CodecParams codec = make_codec(8, 99);
    Tensor x = random_images(1, 128, 11);
    Tensor z = encode_image(x, codec);
    CHECK(z.shape == Shape{1, 16, 16, 192});
}

TEST_CASE("mixing matrix is orthogonal") {
    for (uint64_t seed : {1ull, 1234ull, 777ull}) {
        CodecParams codec = make_codec(4, seed);
        const int D = codec.f * codec.f * 3;
        REQUIRE(codec.mixing.shape == Shape{D, D});
        // M^T M == I
        double worst = 0.0;
        for (int i = 0; i < D; ++i) {
            for (int j = 0; j < D; ++j) {
                double dot = 0.0;
                for (int k = 0; k < D; ++k)
                    dot += static_cast<double>(codec.mixing.data[static_cast<size_t>(k * D + i)]) *
                           static_cast<double>(codec.mixing.data[static_cast<size_t>(k * D + j)]);
                worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
            }
        }
        CHECK(worst <= 1e-5);
    }
}

TEST_CASE("zero image encodes to zero latents and back") {
    CodecParams codec = make_codec(4, 5);
    Tensor x({2, 16, 16, 3}, 0.0f);
    Tensor z = encode_image(x, codec);
    for (float v : z.data) CHECK(v == 0.0f);
    Tensor back = decode_latents(z, codec);
    for (float v : back.data) CHECK(v == 0.0f);
}

TEST_CASE("same seed same codec, different seed different codec") {
    CodecParams a = make_codec(4, 42), b = make_codec(4, 42), c = make_codec(4, 43);
    CHECK(a.mixing.data == b.mixing.data);
    CHECK(a.mixing.data != c.mixing.data);
}

TEST_CASE("encode validates shape and divisibility") {
    CodecParams codec = make_codec(4, 1);
    Tensor bad({1, 30, 30, 3}, 0.0f);  // 30 % 4 != 0
    CHECK_THROWS_AS(encode_image(bad, codec), ShapeError);
    Tensor wrong_rank({30, 30, 3}, 0.0f);
    CHECK_THROWS_AS(encode_image(wrong_rank, codec), ShapeError);
}

TEST_CASE("graph-side decode matches the reference decode") {
    CodecParams codec = make_codec(4, 1234);
    Tensor x = random_images(2, 16, 21);
    Tensor z = encode_image(x, codec);

    Graph g;
    Ref zr = constant(g, z);
    Ref xr = decode_latents_ref(zr, codec);
    Tensor direct = decode_latents(z, codec);
    REQUIRE(xr.shape() == direct.shape);
    const auto& got = xr.value().data;
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(got[i] == doctest::Approx(direct.data[i]).epsilon(1e-5));
}
