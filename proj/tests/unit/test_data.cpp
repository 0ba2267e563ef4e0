#include <doctest.h>

#include <algorithm>
#include <set>
#include <string>

#include "metapolyp/data.hpp"
#include "metapolyp/error.hpp"
#include "metapolyp/netpbm.hpp"
#include "test_util.hpp"

using namespace metapolyp;
using testutil::TempDir;

namespace {

std::vector<std::uint8_t> bytes_of(const std::string& header, std::initializer_list<int> raster) {
    std::vector<std::uint8_t> b(header.begin(), header.end());
    for (int v : raster) b.push_back(static_cast<std::uint8_t>(v));
    return b;
}

std::size_t parse_offset(const std::vector<std::uint8_t>& b) {
    try {
        decode_pnm(b);
    } catch (const ParseError& e) {
        return e.offset();
    }
    FAIL("expected a ParseError");
    return 0;
}

}  // namespace

TEST_CASE("P5 hand decode") {
    const auto r = decode_pnm(bytes_of("P5\n2 2\n255\n", {0, 255, 255, 0}));
    CHECK(r.width == 2);
    CHECK(r.height == 2);
    CHECK(r.channels == 1);
    const auto m = mask_from_raster(r);
    CHECK(m == Tensor::from({2, 2, 1}, {0, 1, 1, 0}));
}

TEST_CASE("P6 decode, comments and maxval rescale") {
    const auto r = decode_pnm(bytes_of("P6 # rgb\n1 2\n# size done\n255\n", {255, 0, 10, 1, 2, 3}));
    CHECK(r.width == 1);
    CHECK(r.height == 2);
    CHECK(r.pixels == std::vector<std::uint8_t>{255, 0, 10, 1, 2, 3});
    const auto low = decode_pnm(bytes_of("P5 2 1 15\n", {15, 0}));
    CHECK(low.pixels == std::vector<std::uint8_t>{255, 0});
}

TEST_CASE("malformed Netpbm reports byte offsets") {
    CHECK(parse_offset(bytes_of("Q5\n1 1\n255\n", {0})) == 0);
    CHECK(parse_offset(bytes_of("P3\n1 1\n255\n", {0})) == 1);
    CHECK(parse_offset(bytes_of("P5\nx 1\n255\n", {0})) == 3);
    CHECK(parse_offset(bytes_of("P5\n2 2\n255\n", {0, 1, 2})) == 14);
    CHECK(parse_offset(bytes_of("P5\n1 1\n300\n", {0})) == 7);
    CHECK(parse_offset(bytes_of("P5\n1 1\n255", {})) == 10);
    CHECK(parse_offset(bytes_of("P5\n2 1\n100\n", {50, 101})) == 12);
    CHECK(parse_offset(bytes_of("P5\n0 1\n255\n", {})) == 3);
    CHECK(parse_offset(bytes_of("P5\n", {})) == 3);
}

TEST_CASE("Netpbm encode round trip") {
    Raster r{3, 2, 3, {}};
    for (int i = 0; i < 18; ++i) r.pixels.push_back(static_cast<std::uint8_t>(i * 13));
    CHECK(decode_pnm(encode_pnm(r)) == r);
    TempDir dir("pnm");
    write_pnm(dir.path() / "a.ppm", r);
    CHECK(read_pnm(dir.path() / "a.ppm") == r);
    CHECK_THROWS_AS(read_pnm(dir.path() / "missing.ppm"), Error);
}

TEST_CASE("normalization endpoints") {
    Raster r{2, 1, 3, {0, 0, 0, 255, 255, 255}};
    const auto t = image_from_raster(r);
    CHECK(t[0] == -1.0f);
    CHECK(t[3] == 1.0f);
    CHECK(raster_from_image(t) == r);
    CHECK_THROWS_AS(image_from_raster(Raster{1, 1, 1, {0}}), DimensionError);
    const auto mask = mask_from_raster(Raster{3, 1, 1, {127, 128, 255}});
    CHECK(mask == Tensor::from({1, 3, 1}, {0, 1, 1}));
}

TEST_CASE("resizing") {
    const auto t = testutil::random_tensor({5, 7, 3}, 1);
    CHECK(resize_bilinear(t, 5, 7) == t);
    CHECK(resize_nearest(t, 5, 7) == t);
    const auto c = resize_bilinear(Tensor({3, 3, 2}, 0.25f), 8, 5);
    for (float v : c.data()) CHECK(v == 0.25f);
    Tensor m({4, 4, 1});
    m.at(1, 2, 0) = 1.0f;
    const auto up = resize_nearest(m, 8, 8);
    for (std::size_t y = 0; y < 8; ++y) {
        for (std::size_t x = 0; x < 8; ++x) CHECK(up.at(y, x, 0) == m.at(y / 2, x / 2, 0));
    }
}

TEST_CASE("dataset loading and pairing") {
    TempDir dir("load");
    Rng rng(11);
    auto samples = synth_polyp(rng, 32, 3);
    write_dataset(dir.path(), samples);

    const auto loaded = load_dataset(dir.path() / "images", dir.path() / "masks", 32, 32);
    REQUIRE(loaded.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(loaded[i].id == samples[i].id);
        CHECK(loaded[i].mask == samples[i].mask);
        CHECK(testutil::max_abs_diff(loaded[i].image, samples[i].image) <= 1.0 / 127.5 + 1e-6);
        validate_sample(loaded[i]);
    }
    const auto small = load_dataset(dir.path() / "images", dir.path() / "masks", 64, 48);
    CHECK(small[0].image.shape() == Shape{64, 48, 3});
    CHECK(small[0].mask.shape() == Shape{64, 48, 1});
    validate_sample(small[0]);

    SUBCASE("orphan image") {
        std::filesystem::remove(dir.path() / "masks" / "synth_0001.pgm");
        try {
            load_dataset(dir.path() / "images", dir.path() / "masks", 32, 32);
            FAIL("expected PairingError");
        } catch (const PairingError& e) {
            CHECK(std::string(e.what()).find("synth_0001") != std::string::npos);
        }
    }
    SUBCASE("orphan mask") {
        std::filesystem::remove(dir.path() / "images" / "synth_0002.ppm");
        CHECK_THROWS_AS(load_dataset(dir.path() / "images", dir.path() / "masks", 32, 32), PairingError);
    }
    SUBCASE("corrupt file") {
        testutil::write_bytes(dir.path() / "images" / "synth_0000.ppm", bytes_of("P6\n4 4\n255\n", {1, 2}));
        CHECK_THROWS_AS(load_dataset(dir.path() / "images", dir.path() / "masks", 32, 32), ParseError);
    }
}

TEST_CASE("split sizes and partition") {
    CHECK(split_indices(1450, {}).train.size() == 870);
    CHECK(split_indices(1450, {}).val.size() == 290);
    CHECK(split_indices(1450, {}).test.size() == 290);
    CHECK(split_indices(900 + 550, {}).train.size() == 870);
    for (std::size_t n : {5u, 7u, 13u, 100u, 1450u}) {
        SplitSpec spec;
        spec.seed = n;
        const auto s = split_indices(n, spec);
        CHECK(s.val.size() == n / 5);
        CHECK(s.test.size() == n / 5);
        std::set<std::size_t> all;
        for (const auto* part : {&s.train, &s.val, &s.test}) {
            for (auto i : *part) CHECK(all.insert(i).second);
        }
        CHECK(all.size() == n);
        CHECK(*all.rbegin() == n - 1);
        const auto again = split_indices(n, spec);
        CHECK(again.train == s.train);
        CHECK(again.val == s.val);
        CHECK(again.test == s.test);
    }
    const auto other = split_indices(100, {0.6, 0.2, 0.2, 1});
    CHECK(other.train != split_indices(100, {0.6, 0.2, 0.2, 2}).train);
    CHECK_THROWS_AS(split_indices(4, {}), UsageError);
    CHECK_THROWS_AS(split_indices(10, {0.5, 0.2, 0.2, 0}), ConfigError);

    Rng rng(3);
    const auto samples = synth_polyp(rng, 32, 10);
    const auto parts = split(samples, {});
    CHECK(parts.train.size() == 6);
    CHECK(parts.val.size() == 2);
    CHECK(parts.test.size() == 2);
}

TEST_CASE("synthetic generator") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        const auto s = synth_polyp(rng, 32, 1).at(0);
        validate_sample(s);
        const double frac = s.mask.sum() / static_cast<double>(s.mask.size());
        CAPTURE(seed);
        CHECK(frac > 0.01);
        CHECK(frac < 0.6);
        for (float v : s.image.data()) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
    }
    Rng a(42), b(42);
    const auto sa = synth_polyp(a, 64, 3), sb = synth_polyp(b, 64, 3);
    CHECK(sa == sb);
    CHECK_FALSE(sa[0] == sa[1]);
    CHECK(sa[2].id == "synth_0002");
    Rng c(1);
    CHECK_THROWS_AS(synth_polyp(c, 40, 1), ConfigError);

    TempDir d1("synth1"), d2("synth2");
    write_dataset(d1.path(), sa);
    write_dataset(d2.path(), sb);
    for (const char* f : {"images/synth_0000.ppm", "masks/synth_0002.pgm"}) {
        CHECK(testutil::read_bytes(d1.path() / f) == testutil::read_bytes(d2.path() / f));
    }
}
