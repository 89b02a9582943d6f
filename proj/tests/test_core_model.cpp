#include "oracles.hpp"

#include "protosplit/core_model.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace protosplit;
using doctest::Approx;

namespace {

PrototypeBank bank_of(std::vector<std::vector<double>> kernels, std::vector<std::vector<double>> head) {
    PrototypeBank b;
    for (auto& r : kernels) b.kernels.append_row(r);
    for (auto& r : head) b.head.append_row(r);
    return b;
}

PrototypeBank identity_bank(std::size_t n) {
    PrototypeBank b;
    b.kernels = Matrix(n, n);
    b.head = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        b.kernels(i, i) = 1.0;
        b.head(i, i) = 1.0;
    }
    return b;
}

} // namespace

TEST_CASE("channel_logits are per-kernel dot products") {
    auto basis = identity_bank(2);
    CHECK(channel_logits(std::vector<double>{1, 0}, basis) == std::vector<double>{1, 0});
    CHECK(channel_logits(std::vector<double>{0, 0}, basis) == std::vector<double>{0, 0});

    auto b = bank_of({{2, 0}, {0, 3}, {1, 1}}, {{1}, {1}, {1}});
    CHECK(channel_logits(std::vector<double>{1, 1}, b) == std::vector<double>{2, 3, 2});
}

TEST_CASE("channel_logits names both lengths on a shape mismatch") {
    auto b = identity_bank(2);
    try {
        channel_logits(std::vector<double>{1, 2, 3}, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find('2') != std::string::npos);
        CHECK(msg.find('3') != std::string::npos);
    }
}

TEST_CASE("softmax_channels examples") {
    auto p = softmax_channels(std::vector<double>{0, 0});
    CHECK(p[0] == Approx(0.5));
    CHECK(p[1] == Approx(0.5));

    for (double c : {-700.0, 0.0, 3.5, 900.0}) {
        auto q = softmax_channels(std::vector<double>{c, c, c});
        for (double v : q) CHECK(v == Approx(1.0 / 3.0).epsilon(1e-12));
    }

    auto r = softmax_channels(std::vector<double>{std::log(1.0), std::log(2.0), std::log(3.0)});
    CHECK(r[0] == Approx(1.0 / 6.0).epsilon(1e-12));
    CHECK(r[1] == Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r[2] == Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax_channels rejects non-finite logits") {
    CHECK_THROWS_AS(softmax_channels(std::vector<double>{0, NAN}), std::invalid_argument);
    CHECK_THROWS_AS(softmax_channels(std::vector<double>{INFINITY, 0}), std::invalid_argument);
    CHECK_THROWS_AS(softmax_channels(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("softmax properties: normalisation, shift invariance, agreement with the definition") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> shift(-50, 50);
    for (int trial = 0; trial < 500; ++trial) {
        const auto logits = oracle::random_vector(1 + trial % 17, rng, 3.0);
        const auto p = softmax_channels(logits);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            CHECK(v < 1.0 + 1e-15);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) < 1e-9);

        auto shifted = logits;
        const double c = shift(rng);
        for (double& v : shifted) v += c;
        const auto q = softmax_channels(shifted);
        const auto naive = oracle::naive_softmax(logits);
        for (std::size_t i = 0; i < p.size(); ++i) {
            CHECK(std::abs(p[i] - q[i]) < 1e-9);
            CHECK(std::abs(p[i] - naive[i]) < 1e-12);
        }
        CHECK(argmax(p) == argmax(logits));
    }
}

TEST_CASE("pool_activations examples") {
    std::vector<ActivationVector> one{{0.3, 0.7}};
    CHECK(pool_activations(one) == ActivationVector{0.3, 0.7});
    std::vector<ActivationVector> two{{0.9, 0.1}, {0.2, 0.8}};
    CHECK(pool_activations(two) == ActivationVector{0.9, 0.8});
    std::vector<ActivationVector> same{{0.4, 0.6}, {0.4, 0.6}, {0.4, 0.6}};
    CHECK(pool_activations(same) == ActivationVector{0.4, 0.6});
    CHECK_THROWS(pool_activations(std::vector<ActivationVector>{}));
    std::vector<ActivationVector> ragged{{0.4, 0.6}, {1.0}};
    CHECK_THROWS_AS(pool_activations(ragged), ShapeError);
}

TEST_CASE("classify examples") {
    auto b = identity_bank(2);
    CHECK(classify(std::vector<double>{1, 0}, b) == std::vector<double>{1, 0});
    CHECK(classify(std::vector<double>{0, 0}, b) == std::vector<double>{0, 0});
    auto w = bank_of({{1, 0}, {0, 1}}, {{1, 0}, {0, 2}});
    auto o = classify(std::vector<double>{0.5, 0.5}, w);
    CHECK(o[0] == Approx(0.5));
    CHECK(o[1] == Approx(1.0));
    CHECK_THROWS_AS(classify(std::vector<double>{1, 0, 0}, w), ShapeError);
}

TEST_CASE("classify is linear and non-negative for non-negative inputs") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0, 1);
    for (int trial = 0; trial < 200; ++trial) {
        auto bank = oracle::random_bank(6, 4, 3, rng);
        std::vector<double> p1(6), p2(6);
        for (auto& v : p1) v = u(rng);
        for (auto& v : p2) v = u(rng);
        const double a = 3 * u(rng), b = 3 * u(rng);
        std::vector<double> mix(6);
        for (std::size_t i = 0; i < 6; ++i) mix[i] = a * p1[i] + b * p2[i];
        const auto o1 = classify(p1, bank), o2 = classify(p2, bank), om = classify(mix, bank);
        for (std::size_t k = 0; k < 3; ++k) {
            CHECK(std::abs(om[k] - (a * o1[k] + b * o2[k])) < 1e-9);
            CHECK(om[k] >= 0.0);
        }
    }
}

TEST_CASE("argmax resolves ties toward the smaller index") {
    CHECK(argmax(std::vector<double>{1, 3, 3, 2}) == 1);
    CHECK(argmax(std::vector<double>{5}) == 0);
}

TEST_CASE("bank validation") {
    auto b = identity_bank(2);
    CHECK_NOTHROW(b.validate());
    b.head(0, 1) = -0.1;
    CHECK_THROWS(b.validate());
    auto single = bank_of({{1, 0}}, {{1}});
    CHECK_THROWS(single.validate());
    auto nan = identity_bank(2);
    nan.kernels(1, 1) = NAN;
    CHECK_THROWS(nan.validate());
}

TEST_CASE("corpus validation catches grid, width and cache violations") {
    Corpus c;
    c.grid_h = 2;
    c.grid_w = 2;
    c.images.push_back({"img", 0});
    PatchRecord p{"p", {1.0, 0.0}, "img", {1, 1}, "", std::nullopt};
    c.patches.push_back(p);
    CHECK_NOTHROW(c.validate(2));
    CHECK_THROWS_AS(c.validate(3), ShapeError);

    auto off_grid = c;
    off_grid.patches[0].location = {2, 0};
    CHECK_THROWS(off_grid.validate(2));

    auto bad_cache = c;
    bad_cache.patches[0].activation_cache = std::vector<double>{0.5, 0.4};
    CHECK_THROWS(bad_cache.validate(2));
    bad_cache.patches[0].activation_cache = std::vector<double>{0.5, 0.5};
    CHECK_NOTHROW(bad_cache.validate(2));

    auto orphan = c;
    orphan.patches[0].image_id = "nowhere";
    CHECK_THROWS(orphan.validate(2));
}

TEST_CASE("pooled image activations take the max over an image's locations") {
    Corpus c;
    c.grid_h = 1;
    c.grid_w = 2;
    c.images = {{"a", 0}, {"b", 1}};
    c.patches = {{"a0", {1, 0}, "a", {0, 0}, "", std::nullopt},
                 {"a1", {0, 1}, "a", {0, 1}, "", std::nullopt},
                 {"b0", {0, 2}, "b", {0, 0}, "", std::nullopt}};
    auto bank = identity_bank(2);
    const auto per_patch = corpus_activations(c, bank);
    const auto pooled = pooled_image_activations(c, per_patch);
    REQUIRE(pooled.rows() == 2);
    for (std::size_t d = 0; d < 2; ++d) {
        CHECK(pooled(0, d) == std::max(per_patch(0, d), per_patch(1, d)));
        CHECK(pooled(1, d) == per_patch(2, d));
    }
    const auto labelled = labeled_pooled_activations(c, bank);
    CHECK(labelled[1].label == 1);
}

TEST_CASE("patch_activations ignores a stale activation cache") {
    auto bank = identity_bank(2);
    PatchRecord p{"p", {2.0, 0.0}, "img", {0, 0}, "", std::vector<double>{0.5, 0.5}};
    const auto fresh = patch_activations(p, bank);
    CHECK(fresh[0] > 0.8);
}
