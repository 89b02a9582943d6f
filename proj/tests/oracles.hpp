#pragma once

#include "protosplit/core_model.hpp"
#include "protosplit/detection.hpp"
#include "protosplit/splitting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

namespace oracle {

using protosplit::Clique;
using protosplit::SimilarityGraph;

inline bool is_clique(const SimilarityGraph& g, std::uint32_t mask) {
    for (std::size_t i = 0; i < g.node_count(); ++i) {
        if (!(mask >> i & 1u)) continue;
        for (std::size_t j = i + 1; j < g.node_count(); ++j) {
            if ((mask >> j & 1u) && !g.has_edge(i, j)) return false;
        }
    }
    return true;
}

// Every vertex subset; keep complete ones that no single extra vertex extends.
inline std::set<Clique> brute_force_maximal_cliques(const SimilarityGraph& g) {
    const std::size_t n = g.node_count();
    std::set<Clique> out;
    for (std::uint32_t mask = 1; mask < (1u << n); ++mask) {
        if (!is_clique(g, mask)) continue;
        bool maximal = true;
        for (std::size_t v = 0; v < n && maximal; ++v) {
            if (!(mask >> v & 1u) && is_clique(g, mask | (1u << v))) maximal = false;
        }
        if (!maximal) continue;
        Clique c;
        for (std::size_t v = 0; v < n; ++v) {
            if (mask >> v & 1u) c.push_back(v);
        }
        out.insert(c);
    }
    return out;
}

inline SimilarityGraph random_graph(std::size_t n, double density, std::mt19937_64& rng) {
    SimilarityGraph g(n);
    std::bernoulli_distribution edge(density);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (edge(rng)) g.add_edge(i, j);
        }
    }
    return g;
}

// Softmax by definition, no max shift; used only on small logits.
inline std::vector<double> naive_softmax(const std::vector<double>& logits) {
    double z = 0.0;
    for (double l : logits) z += std::exp(l);
    std::vector<double> p;
    for (double l : logits) p.push_back(std::exp(l) / z);
    return p;
}

inline double loss_at(const std::vector<double>& feature, const protosplit::PrototypeBank& bank,
                      std::size_t e, protosplit::Membership m, const protosplit::SplitHyperparams& h) {
    const auto p = protosplit::softmax_channels(protosplit::channel_logits(feature, bank));
    return protosplit::split_loss(m, p, e, h);
}

struct FiniteDifference {
    std::vector<double> original;
    std::vector<double> duplicate;
};

inline FiniteDifference central_difference(const std::vector<double>& feature, protosplit::PrototypeBank bank,
                                           std::size_t e, protosplit::Membership m,
                                           const protosplit::SplitHyperparams& h, double step) {
    FiniteDifference fd;
    const std::size_t dup = bank.num_prototypes() - 1;
    for (std::size_t row : {e, dup}) {
        auto& out = row == e ? fd.original : fd.duplicate;
        for (std::size_t c = 0; c < bank.feature_width(); ++c) {
            const double keep = bank.kernels(row, c);
            bank.kernels(row, c) = keep + step;
            const double up = loss_at(feature, bank, e, m, h);
            bank.kernels(row, c) = keep - step;
            const double down = loss_at(feature, bank, e, m, h);
            bank.kernels(row, c) = keep;
            out.push_back((up - down) / (2.0 * step));
        }
    }
    return fd;
}

// Full stable sort over every patch, then first-seen-per-image filter.
inline std::vector<std::size_t> sorted_top_k(const protosplit::Corpus& corpus, const protosplit::Matrix& acts,
                                             std::size_t d, std::size_t k, bool dedup) {
    std::vector<std::size_t> order(corpus.patches.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return acts(a, d) > acts(b, d); });
    std::vector<std::size_t> out;
    std::set<std::string> seen;
    for (auto i : order) {
        if (out.size() == k) break;
        if (dedup && !seen.insert(corpus.patches[i].image_id).second) continue;
        out.push_back(i);
    }
    return out;
}

inline protosplit::PrototypeBank random_bank(std::size_t d, std::size_t c, std::size_t k, std::mt19937_64& rng,
                                             double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    protosplit::PrototypeBank bank;
    bank.kernels = protosplit::Matrix(d, c);
    bank.head = protosplit::Matrix(d, k);
    for (double& v : bank.kernels.values()) v = g(rng);
    for (double& v : bank.head.values()) v = u(rng) < 0.5 ? 0.0 : u(rng);
    return bank;
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    std::vector<double> v(n);
    for (double& x : v) x = g(rng);
    return v;
}

} // namespace oracle
