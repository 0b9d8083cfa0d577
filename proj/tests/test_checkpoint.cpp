#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "prem/checkpoint.hpp"
#include "support/gradcheck.hpp"

using namespace prem;

namespace {

checkpoint::Archive sample_archive() {
    checkpoint::Archive a;
    a["b.weight"] = {{2, 3}, {1, -2, 3.5, 1e-300, -0.0, 6}};
    a["a.bias"] = {{1}, {0.1}};
    a["c"] = {{2, 1, 2}, {1, 2, 3, 4}};
    return a;
}

}  // namespace

TEST_CASE("archive round trip is bit exact") {
    const auto a = sample_archive();
    const auto bytes = checkpoint::encode(a);
    const auto b = checkpoint::decode(bytes);
    REQUIRE(b.size() == a.size());
    for (const auto& [name, rec] : a) {
        REQUIRE(b.count(name));
        CHECK(b.at(name).shape == rec.shape);
        REQUIRE(b.at(name).values.size() == rec.values.size());
        CHECK(std::memcmp(b.at(name).values.data(), rec.values.data(), rec.values.size() * sizeof(double)) == 0);
    }
    CHECK(checkpoint::encode(b) == bytes);
}

TEST_CASE("archive layout") {
    checkpoint::Archive a;
    a["z"] = {{1}, {1.0}};
    a["y"] = {{1}, {2.0}};
    const auto bytes = checkpoint::encode(a);
    CHECK(std::string(bytes.begin(), bytes.begin() + 9) == "PREMCKPT1");
    CHECK(bytes[9] == 2);  // little-endian u32 count
    CHECK(bytes[10] == 0);
    // First record is "y" (lexicographic order): name_len then name.
    CHECK(bytes[13] == 1);
    CHECK(bytes[17] == 'y');
    CHECK(bytes[18] == checkpoint::kDtypeF64);
    // magic + count + 2 x (4 + 1 + 1 + 4 + 8 + 8)
    CHECK(bytes.size() == 9 + 4 + 2 * 26);
}

TEST_CASE("malformed archives are rejected") {
    auto bytes = checkpoint::encode(sample_archive());
    SUBCASE("truncated") {
        bytes.pop_back();
        CHECK_THROWS_AS(checkpoint::decode(bytes), CheckpointError);
    }
    SUBCASE("trailing bytes") {
        bytes.push_back(0);
        CHECK_THROWS_AS(checkpoint::decode(bytes), CheckpointError);
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(checkpoint::decode(bytes), CheckpointError);
    }
    SUBCASE("unknown dtype") {
        bytes[9 + 4 + 4 + 6] = 7;  // dtype of "a.bias"
        CHECK_THROWS_AS(checkpoint::decode(bytes), CheckpointError);
    }
    SUBCASE("empty") { CHECK_THROWS_AS(checkpoint::decode({}), CheckpointError); }
}

TEST_CASE("parameter export and import") {
    ParamStore src;
    src.add("m.w", prem::testing::random_param({3, 2}, 1));
    src.add("m.b", prem::testing::random_param({2}, 2));
    checkpoint::Archive a;
    checkpoint::export_params(src, a);
    CHECK(a.size() == 2);

    ParamStore dst;
    dst.add("m.w", Tensor::parameter({3, 2}, std::vector<double>(6, 0.0)));
    dst.add("m.b", Tensor::parameter({2}, {0.0, 0.0}));
    checkpoint::import_params(a, dst);
    CHECK(dst.get("m.w").to_vector() == src.get("m.w").to_vector());
    CHECK(dst.get("m.b").to_vector() == src.get("m.b").to_vector());

    ParamStore wrong_shape;
    wrong_shape.add("m.w", Tensor::parameter({2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(checkpoint::import_params(a, wrong_shape), CheckpointError);
    ParamStore missing;
    missing.add("m.other", Tensor::parameter({1}, {0.0}));
    CHECK_THROWS_AS(checkpoint::import_params(a, missing), CheckpointError);
}

TEST_CASE("file round trip") {
    const auto dir = std::filesystem::temp_directory_path() / "prem_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "x.ckpt";
    checkpoint::write(path, sample_archive());
    CHECK(checkpoint::encode(checkpoint::read(path)) == checkpoint::encode(sample_archive()));
    CHECK_THROWS_AS(checkpoint::read(dir / "missing.ckpt"), CheckpointError);
    std::filesystem::remove_all(dir);
}
