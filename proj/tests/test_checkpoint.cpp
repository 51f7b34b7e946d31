#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "levelblend/checkpoint.hpp"
#include "helpers.hpp"

using namespace lvb;

namespace {

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("checkpoint save/load round-trip is exact") {
    Rng rng(77);
    Checkpoint ck;
    ck.set_meta("format", "test.v1");
    ck.set_meta("note", "a=b=c"); // values may contain '='
    std::vector<float> payload(31);
    for (auto& v : payload) v = rng.uniform(-5.0f, 5.0f);
    ck.add_tensor("weights", {31}, payload);
    ck.add_tensor("matrix", {2, 3}, {1.5f, -2.25f, 0.0f, 1e-30f, 3e30f, -0.0f});

    auto path = (std::filesystem::temp_directory_path() / "lvb_ck_test.mvckpt").string();
    ck.save(path);

    Checkpoint back = Checkpoint::load(path);
    CHECK(back.meta("format") == "test.v1");
    CHECK(back.meta("note") == "a=b=c");
    REQUIRE(back.tensor_data("weights") == payload);
    REQUIRE(back.tensor_shape("matrix") == num::Shape{2, 3});
    REQUIRE(back.tensor_data("matrix") ==
            std::vector<float>{1.5f, -2.25f, 0.0f, 1e-30f, 3e30f, -0.0f});

    SECTION("resaving reproduces identical bytes") {
        auto path2 = (std::filesystem::temp_directory_path() / "lvb_ck_test2.mvckpt").string();
        back.save(path2);
        CHECK(read_bytes(path) == read_bytes(path2));
        std::filesystem::remove(path2);
    }
    SECTION("file starts with the magic bytes") {
        CHECK(read_bytes(path).substr(0, 7) == "MVCKPT1");
    }
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint rejects foreign and truncated files") {
    auto dir = std::filesystem::temp_directory_path();
    SECTION("wrong magic") {
        auto path = (dir / "lvb_ck_bad.bin").string();
        std::ofstream(path, std::ios::binary) << "NOTACKPT and more";
        try {
            Checkpoint::load(path);
            FAIL("expected CheckpointIncompatible");
        } catch (const Error& e) {
            CHECK(e.code() == "CheckpointIncompatible");
        }
        std::filesystem::remove(path);
    }
    SECTION("truncated tensor payload") {
        Checkpoint ck;
        ck.set_meta("format", "test.v1");
        ck.add_tensor("w", {8}, std::vector<float>(8, 1.0f));
        auto path = (dir / "lvb_ck_trunc.mvckpt").string();
        ck.save(path);
        auto bytes = read_bytes(path);
        std::ofstream(path, std::ios::binary) << bytes.substr(0, bytes.size() - 9);
        CHECK_THROWS_AS(Checkpoint::load(path), Error);
        std::filesystem::remove(path);
    }
    SECTION("missing tensor name") {
        Checkpoint ck;
        CHECK_THROWS_AS(ck.tensor_data("absent"), Error);
    }
}
