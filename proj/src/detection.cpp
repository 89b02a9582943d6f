#include "protosplit/detection.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>

namespace protosplit {

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine similarity operand", a.size(), b.size());
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw std::invalid_argument("cosine similarity of a zero vector is undefined");
    }
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

SimilarityGraph::SimilarityGraph(std::size_t node_count, double threshold)
    : adjacency_(node_count, 0), threshold_(threshold) {
    if (node_count > max_nodes) {
        throw std::invalid_argument("similarity graphs hold at most 64 nodes, got " +
                                    std::to_string(node_count));
    }
}

SimilarityGraph SimilarityGraph::from_features(std::span<const std::vector<double>> features,
                                               double threshold) {
    SimilarityGraph graph(features.size(), threshold);
    for (std::size_t i = 0; i < features.size(); ++i) {
        for (std::size_t j = i + 1; j < features.size(); ++j) {
            if (cosine_similarity(features[i], features[j]) > threshold) {
                graph.add_edge(i, j);
            }
        }
    }
    return graph;
}

void SimilarityGraph::add_edge(std::size_t i, std::size_t j) {
    if (i >= node_count() || j >= node_count()) {
        throw std::out_of_range("edge endpoint outside the graph");
    }
    if (i == j) {
        throw std::invalid_argument("similarity graphs carry no self-loops");
    }
    adjacency_[i] |= std::uint64_t{1} << j;
    adjacency_[j] |= std::uint64_t{1} << i;
}

bool SimilarityGraph::has_edge(std::size_t i, std::size_t j) const {
    return (adjacency_.at(i) >> j) & 1U;
}

std::size_t SimilarityGraph::edge_count() const {
    std::size_t twice = 0;
    for (auto mask : adjacency_) {
        twice += static_cast<std::size_t>(std::popcount(mask));
    }
    return twice / 2;
}

namespace {

Clique members(std::uint64_t mask) {
    Clique out;
    while (mask != 0) {
        out.push_back(static_cast<std::size_t>(std::countr_zero(mask)));
        mask &= mask - 1;
    }
    return out;
}

void bron_kerbosch(const SimilarityGraph& graph, std::uint64_t r, std::uint64_t p, std::uint64_t x,
                   std::vector<Clique>& out) {
    if (p == 0 && x == 0) {
        out.push_back(members(r));
        return;
    }
    // Pivot on the vertex of P u X with the most neighbours in P.
    std::uint64_t candidates = p | x;
    std::size_t pivot = 0;
    int best = -1;
    while (candidates != 0) {
        const auto u = static_cast<std::size_t>(std::countr_zero(candidates));
        candidates &= candidates - 1;
        const int degree = std::popcount(p & graph.neighbours(u));
        if (degree > best) {
            best = degree;
            pivot = u;
        }
    }
    std::uint64_t branch = p & ~graph.neighbours(pivot);
    while (branch != 0) {
        const auto v = static_cast<std::size_t>(std::countr_zero(branch));
        const std::uint64_t bit = std::uint64_t{1} << v;
        branch &= branch - 1;
        bron_kerbosch(graph, r | bit, p & graph.neighbours(v), x & graph.neighbours(v), out);
        p &= ~bit;
        x |= bit;
    }
}

} // namespace

std::vector<Clique> maximal_cliques(const SimilarityGraph& graph) {
    std::vector<Clique> cliques;
    const std::size_t n = graph.node_count();
    if (n == 0) {
        return cliques;
    }
    const std::uint64_t all = n == 64 ? ~std::uint64_t{0} : (std::uint64_t{1} << n) - 1;
    bron_kerbosch(graph, 0, all, 0, cliques);
    std::sort(cliques.begin(), cliques.end(), [](const Clique& a, const Clique& b) {
        if (a.size() != b.size()) {
            return a.size() > b.size();
        }
        return a < b;
    });
    return cliques;
}

double clique_dissimilarity(const Clique& first, const Clique& second,
                            std::span<const std::vector<double>> features) {
    if (first.empty() || second.empty()) {
        throw std::invalid_argument("clique dissimilarity needs two non-empty cliques");
    }
    double best = -1.0;
    for (std::size_t i : first) {
        for (std::size_t j : second) {
            best = std::max(best, cosine_similarity(features[i], features[j]));
        }
    }
    return 1.0 - best;
}

TopPatches top_activated_patches(const Corpus& corpus, const Matrix& per_patch_activations,
                                 std::size_t prototype, std::size_t k, bool dedup_per_image) {
    if (k == 0) {
        throw std::invalid_argument("top_activated_patches needs k >= 1");
    }
    if (corpus.patches.empty()) {
        throw std::invalid_argument("top_activated_patches over an empty corpus");
    }
    if (per_patch_activations.rows() != corpus.patches.size()) {
        throw ShapeError("activation rows", corpus.patches.size(), per_patch_activations.rows());
    }
    if (prototype >= per_patch_activations.cols()) {
        throw std::out_of_range("prototype " + std::to_string(prototype) + " out of range");
    }
    std::vector<std::size_t> order(corpus.patches.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return per_patch_activations(a, prototype) > per_patch_activations(b, prototype);
    });

    TopPatches top;
    top.prototype = prototype;
    std::unordered_set<std::string> seen_images;
    for (std::size_t idx : order) {
        if (top.indices.size() == k) {
            break;
        }
        if (dedup_per_image && !seen_images.insert(corpus.patches[idx].image_id).second) {
            continue;
        }
        top.indices.push_back(idx);
        top.activations.push_back(per_patch_activations(idx, prototype));
    }
    top.short_of_request = top.indices.size() < k;
    return top;
}

TopPatches top_activated_patches(const Corpus& corpus, const PrototypeBank& bank,
                                 std::size_t prototype, std::size_t k, bool dedup_per_image) {
    return top_activated_patches(corpus, corpus_activations(corpus, bank), prototype, k,
                                 dedup_per_image);
}

std::vector<PrototypePatchSet> collect_patch_sets(const Corpus& corpus, const PrototypeBank& bank,
                                                  std::size_t k, bool dedup_per_image) {
    const Matrix activations = corpus_activations(corpus, bank);
    std::vector<PrototypePatchSet> sets;
    sets.reserve(bank.num_prototypes());
    for (std::size_t d = 0; d < bank.num_prototypes(); ++d) {
        const auto top = top_activated_patches(corpus, activations, d, k, dedup_per_image);
        PrototypePatchSet set;
        set.prototype = d;
        set.patch_indices = top.indices;
        for (std::size_t idx : top.indices) {
            set.features.push_back(corpus.patches[idx].feature);
        }
        sets.push_back(std::move(set));
    }
    return sets;
}

CliqueReport evaluate_prototype(const PrototypePatchSet& patch_set, double threshold,
                                std::size_t min_clique_size) {
    if (min_clique_size == 0) {
        throw std::invalid_argument("minimum clique size must be at least 1");
    }
    CliqueReport report;
    report.prototype = patch_set.prototype;
    report.threshold = threshold;
    if (patch_set.features.size() < 2 * min_clique_size) {
        return report;
    }
    const auto graph = SimilarityGraph::from_features(patch_set.features, threshold);
    const auto cliques = maximal_cliques(graph);
    if (cliques.size() < 2) {
        if (!cliques.empty()) {
            report.clique_a = cliques[0];
        }
        return report;
    }
    report.clique_a = cliques[0];
    report.clique_b = cliques[1];
    Clique shared;
    std::set_intersection(report.clique_a.begin(), report.clique_a.end(), report.clique_b.begin(),
                          report.clique_b.end(), std::back_inserter(shared));
    if (report.clique_a.size() >= min_clique_size && report.clique_b.size() >= min_clique_size &&
        shared.empty()) {
        report.flagged = true;
        report.dissimilarity =
            clique_dissimilarity(report.clique_a, report.clique_b, patch_set.features);
    }
    return report;
}

double score_threshold(std::span<const PrototypePatchSet> patch_sets, double threshold,
                       std::size_t min_clique_size) {
    double total = 0.0;
    for (const auto& set : patch_sets) {
        const auto report = evaluate_prototype(set, threshold, min_clique_size);
        if (report.flagged) {
            total += report.dissimilarity;
        }
    }
    return total;
}

std::vector<double> ThresholdSweep::grid() const {
    if (!(step > 0.0) || !(min < max)) {
        throw std::invalid_argument("threshold sweep needs min < max and step > 0");
    }
    std::vector<double> values;
    for (std::size_t i = 0;; ++i) {
        const double delta = min + static_cast<double>(i) * step;
        if (delta > max + 1e-9) {
            break;
        }
        values.push_back(delta);
    }
    if (values.empty()) {
        throw std::invalid_argument("empty threshold sweep");
    }
    return values;
}

double DetectionResult::mean_flagged_dissimilarity() const {
    if (ranked.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& r : ranked) {
        total += r.dissimilarity;
    }
    return total / static_cast<double>(ranked.size());
}

double DetectionResult::mean_dissimilarity() const {
    if (reports.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (const auto& r : reports) {
        total += r.dissimilarity;
    }
    return total / static_cast<double>(reports.size());
}

DetectionResult find_optimal_threshold(std::span<const PrototypePatchSet> patch_sets,
                                       const ThresholdSweep& sweep, std::size_t min_clique_size,
                                       std::size_t workers) {
    DetectionResult result;
    result.sweep = sweep;
    result.min_clique_size = min_clique_size;
    result.grid = sweep.grid();
    result.scores.assign(result.grid.size(), 0.0);

    const std::size_t pool = std::max<std::size_t>(1, std::min(workers, result.grid.size()));
    if (pool == 1) {
        for (std::size_t i = 0; i < result.grid.size(); ++i) {
            result.scores[i] = score_threshold(patch_sets, result.grid[i], min_clique_size);
        }
    } else {
        std::vector<std::jthread> threads;
        for (std::size_t w = 0; w < pool; ++w) {
            threads.emplace_back([&, w] {
                for (std::size_t i = w; i < result.grid.size(); i += pool) {
                    result.scores[i] = score_threshold(patch_sets, result.grid[i], min_clique_size);
                }
            });
        }
    }

    result.best_threshold = result.grid.front();
    result.best_score = 0.0;
    for (std::size_t i = 0; i < result.grid.size(); ++i) {
        if (result.scores[i] > result.best_score) {
            result.best_score = result.scores[i];
            result.best_threshold = result.grid[i];
        }
    }

    for (const auto& set : patch_sets) {
        auto report = evaluate_prototype(set, result.best_threshold, min_clique_size);
        if (report.flagged) {
            result.ranked.push_back(report);
        }
        result.reports.push_back(std::move(report));
    }
    std::stable_sort(result.ranked.begin(), result.ranked.end(),
                     [](const CliqueReport& a, const CliqueReport& b) {
                         return a.dissimilarity > b.dissimilarity;
                     });
    return result;
}

} // namespace protosplit
