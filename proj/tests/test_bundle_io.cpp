#include "temp_dir.hpp"

#include "protosplit/bundle_io.hpp"
#include "protosplit/synthetic.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cstring>
#include <fstream>

using namespace protosplit;
namespace fs = std::filesystem;

namespace {

PatchBundle small_bundle(std::uint64_t seed) {
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.prototypes = 8;
    cfg.entangled_count = 2;
    cfg.classes = 3;
    cfg.patches_per_part = 16;
    cfg.planted_per_concept = 3;
    return bundle_from_workbench(generate_bank(cfg));
}

void overwrite(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << bytes;
}

nlohmann::json manifest_of(const fs::path& dir) {
    return nlohmann::json::parse(read_file(dir / "manifest.json"));
}

} // namespace

TEST_CASE("block encoding is byte-exact") {
    Matrix m(1, 2, std::vector<double>{1.0, -2.5});
    const auto bytes = encode_block(m);
    REQUIRE(bytes.size() == 14 + 8);
    CHECK(bytes.substr(0, 4) == "PPB1");
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    CHECK(static_cast<unsigned char>(bytes[6]) == 1);
    CHECK(static_cast<unsigned char>(bytes[10]) == 2);
    const unsigned char one[4] = {0x00, 0x00, 0x80, 0x3f};   // 1.0f little-endian
    CHECK(std::memcmp(bytes.data() + 14, one, 4) == 0);
    const unsigned char neg[4] = {0x00, 0x00, 0x20, 0xc0};   // -2.5f
    CHECK(std::memcmp(bytes.data() + 18, neg, 4) == 0);
    CHECK(decode_block(bytes, "x") == m);
}

TEST_CASE("block decoding rejects malformed payloads") {
    const auto bytes = encode_block(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(decode_block(bytes.substr(0, 10), "kernels"), BundleError);
    CHECK_THROWS_AS(decode_block(bytes.substr(0, bytes.size() - 1), "kernels"), BundleError);
    auto wrong_magic = bytes;
    wrong_magic[3] = '2';
    CHECK_THROWS_AS(decode_block(wrong_magic, "kernels"), BundleError);
    auto wrong_version = bytes;
    wrong_version[4] = 2;
    CHECK_THROWS_AS(decode_block(wrong_version, "kernels"), BundleError);
}

TEST_CASE("crc32 known vector") {
    CHECK(crc32_of("123456789") == 0xCBF43926u);
}

TEST_CASE("round trip is structurally equal with bitwise float blocks") {
    TempDir dir;
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto bundle = small_bundle(seed);
        write_bundle(bundle, dir / "b");
        const auto back = read_bundle(dir / "b");
        CHECK(back == bundle);
        CHECK(encode_block(back.bank.kernels) == encode_block(bundle.bank.kernels));
        CHECK(encode_block(back.bank.head) == encode_block(bundle.bank.head));
        write_bundle(back, dir / "c");
        for (const char* f : {"features.bin", "kernels.bin", "head.bin", "manifest.json", "metadata.json"}) {
            CHECK(read_file(dir / "b" / f) == read_file(dir / "c" / f));
        }
    }
}

TEST_CASE("default-size generator bundle round trips") {
    TempDir dir;
    SynthConfig cfg;
    cfg.seed = 11;
    const auto bundle = bundle_from_workbench(generate_bank(cfg));
    write_bundle(bundle, dir / "b");
    CHECK(read_bundle(dir / "b") == bundle);
}

TEST_CASE("activation caches round trip") {
    TempDir dir;
    auto bundle = small_bundle(4);
    for (auto& p : bundle.corpus.patches) {
        auto a = patch_activations(p, bundle.bank);
        for (double& v : a) v = static_cast<float>(v);
        p.activation_cache = a;
    }
    write_bundle(bundle, dir / "b");
    CHECK(manifest_of(dir / "b").at("has_activation_cache").get<bool>());
    CHECK(read_bundle(dir / "b") == bundle);
}

TEST_CASE("corrupted block is rejected with its name") {
    TempDir dir;
    write_bundle(small_bundle(1), dir / "b");
    auto bytes = read_file(dir / "b" / "kernels.bin");
    bytes[20] ^= 0x01;
    overwrite(dir / "b" / "kernels.bin", bytes);
    try {
        read_bundle(dir / "b");
        FAIL("expected rejection");
    } catch (const BundleError& e) {
        CHECK(e.block() == "kernels");
        CHECK(std::string(e.what()).find("CRC") != std::string::npos);
    }
}

TEST_CASE("manifest prototype count mismatch is rejected") {
    TempDir dir;
    write_bundle(small_bundle(1), dir / "b");
    auto m = manifest_of(dir / "b");
    m["prototypes"] = m["prototypes"].get<int>() + 1;
    overwrite(dir / "b" / "manifest.json", m.dump());
    CHECK_THROWS_AS(read_bundle(dir / "b"), BundleError);
}

TEST_CASE("schema versions: unknown minor fields ignored, unknown major rejected") {
    TempDir dir;
    const auto bundle = small_bundle(2);
    write_bundle(bundle, dir / "b");
    auto m = manifest_of(dir / "b");
    m["schema_version"] = "1.7";
    m["future_field"] = {{"anything", 1}};
    overwrite(dir / "b" / "manifest.json", m.dump());
    CHECK(read_bundle(dir / "b") == bundle);

    m["schema_version"] = "2.0";
    overwrite(dir / "b" / "manifest.json", m.dump());
    CHECK_THROWS_AS(read_bundle(dir / "b"), BundleError);
}

TEST_CASE("corrupt metadata is caught by its checksum") {
    TempDir dir;
    write_bundle(small_bundle(1), dir / "b");
    auto text = read_file(dir / "b" / "metadata.json");
    text[text.find("img")] = 'I';
    overwrite(dir / "b" / "metadata.json", text);
    try {
        read_bundle(dir / "b");
        FAIL("expected rejection");
    } catch (const BundleError& e) {
        CHECK(e.block() == "metadata");
    }
}

TEST_CASE("failed writes leave no partial bundle and keep the previous one") {
    TempDir dir;
    const auto good = small_bundle(1);
    write_bundle(good, dir / "b");

    auto bad = good;
    bad.thumbnails["../escape.pgm"] = "x";
    CHECK_THROWS_AS(write_bundle(bad, dir / "b"), BundleError);
    CHECK(read_bundle(dir / "b") == good);

    auto invalid = good;
    invalid.bank.head(0, 0) = -1.0;
    CHECK_THROWS(write_bundle(invalid, dir / "fresh"));
    CHECK_FALSE(fs::exists(dir / "fresh"));

    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path())) ++entries;
    CHECK(entries == 1);
}

TEST_CASE("rewriting a bundle replaces it atomically") {
    TempDir dir;
    write_bundle(small_bundle(1), dir / "b");
    const auto second = small_bundle(2);
    write_bundle(second, dir / "b");
    CHECK(read_bundle(dir / "b") == second);
}

TEST_CASE("missing bundle directory") {
    CHECK_THROWS_AS(read_bundle("/nonexistent/bundle"), BundleError);
}
