#include "protosplit/metrics.hpp"
#include "protosplit/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <random>

using namespace protosplit;
using doctest::Approx;

TEST_CASE("pattern_purity examples") {
    std::vector<PartSet> wings(10, PartSet{"wing"});
    CHECK(pattern_purity(wings) == 1.0);

    std::vector<PartSet> mixed(5, PartSet{"wing", "leg"});
    mixed.insert(mixed.end(), 5, PartSet{"leg"});
    CHECK(pattern_purity(mixed) == 0.5);

    std::vector<PartSet> three{{"a"}, {"b"}, {"c"}, {"a"}};
    CHECK(pattern_purity(three) == Approx(1.0 / 3.0));
    CHECK_THROWS(pattern_purity(std::vector<PartSet>{}));
}

TEST_CASE("part_purity examples") {
    std::vector<PartSet> heads{{"head"}, {"head", "eye"}, {"head", "beak"}};
    CHECK(part_purity(heads) == 1.0);
    std::vector<PartSet> wings(9, PartSet{"wing"});
    wings.push_back({"tail"});
    CHECK(part_purity(wings) == Approx(0.9));
    CHECK_THROWS(part_purity(std::vector<PartSet>{}));
}

TEST_CASE("purity properties") {
    std::mt19937_64 rng(10);
    const std::vector<std::string> labels{"a", "b", "c", "d"};
    std::uniform_int_distribution<std::size_t> pick(0, 3), count(1, 3), len(1, 12);
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<PartSet> sets(len(rng));
        for (auto& s : sets) {
            for (std::size_t i = count(rng); i > 0; --i) s.insert(labels[pick(rng)]);
        }
        const double pp = pattern_purity(sets);
        const double part = part_purity(sets);
        auto shuffled = sets;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        CHECK(pattern_purity(shuffled) == pp);
        CHECK(part_purity(shuffled) == part);
        const bool identical = std::all_of(sets.begin(), sets.end(), [&](const PartSet& s) { return s == sets[0]; });
        CHECK((pp == 1.0) == identical);
        CHECK(part >= 1.0 / static_cast<double>(sets.size()));
        bool universal = false;
        for (const auto& l : labels) {
            universal = universal || std::all_of(sets.begin(), sets.end(), [&](const PartSet& s) { return s.contains(l); });
        }
        CHECK((part == 1.0) == universal);
    }
}

TEST_CASE("accuracy examples") {
    PrototypeBank b;
    b.kernels = Matrix(2, 2, std::vector<double>{1, 0, 0, 1});
    b.head = Matrix(2, 2, std::vector<double>{1, 0, 0, 1});
    std::vector<LabeledActivation> one{{{0.9, 0.1}, 0}};
    CHECK(accuracy(b, one) == 1.0);
    std::vector<LabeledActivation> flipped{{{0.9, 0.1}, 1}, {{0.2, 0.8}, 0}};
    CHECK(accuracy(b, flipped) == 0.0);
    std::vector<LabeledActivation> tie{{{0.5, 0.5}, 0}};
    CHECK(accuracy(b, tie) == 1.0);
    CHECK_THROWS(accuracy(b, std::vector<LabeledActivation>{}));
}

TEST_CASE("channel_top_patterns needs annotations for every top patch") {
    SynthConfig cfg;
    cfg.seed = 6;
    const auto wb = generate_bank(cfg);
    const auto acts = corpus_activations(wb.corpus, wb.bank);
    const auto ann = wb.truth.annotations();
    const auto patterns = channel_top_patterns(wb.corpus, acts, 0, ann, 10);
    CHECK(patterns.size() == 10);
    CHECK_THROWS(channel_top_patterns(wb.corpus, acts, 0, PartAnnotations{}, 10));
}
