#pragma once

#include "protosplit/core_model.hpp"

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace protosplit {

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Undirected graph over at most 64 patch indices; edge iff cosine similarity > threshold.
class SimilarityGraph {
public:
    static constexpr std::size_t max_nodes = 64;

    explicit SimilarityGraph(std::size_t node_count, double threshold = 0.0);

    /// Connects every pair whose cosine similarity strictly exceeds `threshold`.
    static SimilarityGraph from_features(std::span<const std::vector<double>> features,
                                         double threshold);

    std::size_t node_count() const { return adjacency_.size(); }
    double threshold() const { return threshold_; }

    void add_edge(std::size_t i, std::size_t j);
    bool has_edge(std::size_t i, std::size_t j) const;
    std::uint64_t neighbours(std::size_t i) const { return adjacency_[i]; }
    std::size_t edge_count() const;

private:
    std::vector<std::uint64_t> adjacency_;
    double threshold_;
};

/// Sorted ascending node indices.
using Clique = std::vector<std::size_t>;

/// All maximal cliques (Bron-Kerbosch with pivoting), sorted by size descending, ties by
/// lexicographic order of the sorted members (so the smallest member index decides first).
std::vector<Clique> maximal_cliques(const SimilarityGraph& graph);

/// 1 - max cross-clique cosine similarity.
double clique_dissimilarity(const Clique& first, const Clique& second,
                            std::span<const std::vector<double>> features);

/// The highest-activated patches of one prototype (P_d).
struct TopPatches {
    std::size_t prototype = 0;
    std::vector<std::size_t> indices;     // into Corpus::patches, descending activation
    std::vector<double> activations;
    bool short_of_request = false;
};

TopPatches top_activated_patches(const Corpus& corpus, const Matrix& per_patch_activations,
                                 std::size_t prototype, std::size_t k, bool dedup_per_image = true);
TopPatches top_activated_patches(const Corpus& corpus, const PrototypeBank& bank,
                                 std::size_t prototype, std::size_t k, bool dedup_per_image = true);

/// Features of P_d, the input of the clique heuristic for one prototype.
struct PrototypePatchSet {
    std::size_t prototype = 0;
    std::vector<std::size_t> patch_indices;
    std::vector<std::vector<double>> features;
};

std::vector<PrototypePatchSet> collect_patch_sets(const Corpus& corpus, const PrototypeBank& bank,
                                                  std::size_t k, bool dedup_per_image = true);

struct CliqueReport {
    std::size_t prototype = 0;
    Clique clique_a;    // positions within the prototype's patch set
    Clique clique_b;
    double dissimilarity = 0.0;
    bool flagged = false;
    double threshold = 0.0;
};

CliqueReport evaluate_prototype(const PrototypePatchSet& patch_set, double threshold,
                                std::size_t min_clique_size);

double score_threshold(std::span<const PrototypePatchSet> patch_sets, double threshold,
                       std::size_t min_clique_size);

struct ThresholdSweep {
    double min = 0.05;
    double max = 0.95;
    double step = 0.05;

    /// min + i*step for every i with the value <= max (1e-9 slack).
    std::vector<double> grid() const;
};

struct DetectionResult {
    double best_threshold = 0.0;
    double best_score = 0.0;
    std::size_t min_clique_size = 2;
    ThresholdSweep sweep;
    std::vector<double> grid;
    std::vector<double> scores;              // parallel to grid
    std::vector<CliqueReport> reports;       // every prototype at best_threshold, prototype order
    std::vector<CliqueReport> ranked;        // flagged only, dissimilarity descending

    double mean_flagged_dissimilarity() const;
    double mean_dissimilarity() const;
};

/// Sweeps the grid, keeps the first threshold with the strictly highest score, then reports and
/// ranks all prototypes at that threshold. `workers` > 1 evaluates grid points concurrently.
DetectionResult find_optimal_threshold(std::span<const PrototypePatchSet> patch_sets,
                                       const ThresholdSweep& sweep, std::size_t min_clique_size,
                                       std::size_t workers = 1);

} // namespace protosplit
