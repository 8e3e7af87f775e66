#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "sicql/checkpoint.hpp"
#include "sicql/rng.hpp"

using namespace sicql;

namespace {
std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("checkpoint round trip is bit identical") {
    Rng rng(7);
    Tensor a = Tensor::randn({3, 5}, rng);
    Tensor b = Tensor::randn({17}, rng);
    Tensor c = Tensor::scalar(-0.125);
    const std::string path = temp_path("ck_roundtrip.bin");
    save_checkpoint(path, {{"layer/a", &a}, {"layer/b", &b}, {"c", &c}},
                    {{"step", "123"}, {"mode", "full"}});
    Checkpoint ck = load_checkpoint(path);
    REQUIRE(ck.tensors.size() == 3);
    REQUIRE(ck.tensor("layer/a") == a);
    REQUIRE(ck.tensor("layer/b") == b);
    REQUIRE(ck.tensor("c") == c);
    REQUIRE(ck.meta_or("step", "") == "123");
    REQUIRE(ck.meta_or("mode", "") == "full");
    REQUIRE(ck.meta_or("absent", "fallback") == "fallback");
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint version mismatch is an explicit error") {
    Tensor a = Tensor::scalar(1.0);
    const std::string path = temp_path("ck_version.bin");
    save_checkpoint(path, {{"a", &a}}, {});
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const uint32_t bad = 99;
        f.write(reinterpret_cast<const char*>(&bad), 4);
    }
    REQUIRE_THROWS_WITH(load_checkpoint(path), Catch::Matchers::ContainsSubstring("version"));
    std::filesystem::remove(path);
}

TEST_CASE("garbage file is rejected") {
    const std::string path = temp_path("ck_garbage.bin");
    {
        std::ofstream f(path, std::ios::binary);
        f << "this is not a checkpoint";
    }
    REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);
    std::filesystem::remove(path);
}

TEST_CASE("truncated checkpoint is rejected") {
    Rng rng(9);
    Tensor a = Tensor::randn({64}, rng);
    const std::string path = temp_path("ck_trunc.bin");
    save_checkpoint(path, {{"a", &a}}, {});
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 32);
    REQUIRE_THROWS_AS(load_checkpoint(path), CheckpointError);
    std::filesystem::remove(path);
}

TEST_CASE("missing tensor lookup is an error") {
    Tensor a = Tensor::scalar(2.0);
    const std::string path = temp_path("ck_missing.bin");
    save_checkpoint(path, {{"a", &a}}, {});
    Checkpoint ck = load_checkpoint(path);
    REQUIRE_THROWS_AS(ck.tensor("b"), CheckpointError);
    std::filesystem::remove(path);
}
