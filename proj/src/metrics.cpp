#include "protosplit/metrics.hpp"

#include "protosplit/detection.hpp"

#include <algorithm>
#include <stdexcept>

namespace protosplit {

double pattern_purity(std::span<const PartSet> patch_patterns) {
    if (patch_patterns.empty()) {
        throw std::invalid_argument("pattern purity of an empty patch list");
    }
    const std::set<PartSet> distinct(patch_patterns.begin(), patch_patterns.end());
    return 1.0 / static_cast<double>(distinct.size());
}

double part_purity(std::span<const PartSet> patch_parts) {
    if (patch_parts.empty()) {
        throw std::invalid_argument("part purity of an empty patch list");
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& parts : patch_parts) {
        for (const auto& part : parts) {
            ++counts[part];
        }
    }
    std::size_t best = 0;
    for (const auto& [part, count] : counts) {
        best = std::max(best, count);
    }
    return static_cast<double>(best) / static_cast<double>(patch_parts.size());
}

double accuracy(const PrototypeBank& bank, std::span<const LabeledActivation> samples) {
    if (samples.empty()) {
        throw std::invalid_argument("accuracy over an empty evaluation set");
    }
    std::size_t hits = 0;
    for (const auto& sample : samples) {
        if (argmax(classify(sample.pooled, bank)) == sample.label) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double corpus_accuracy(const PrototypeBank& bank, const Corpus& corpus) {
    return accuracy(bank, labeled_pooled_activations(corpus, bank));
}

std::vector<PartSet> channel_top_patterns(const Corpus& corpus, const Matrix& per_patch_activations,
                                          std::size_t channel, const PartAnnotations& annotations,
                                          std::size_t k) {
    const auto top = top_activated_patches(corpus, per_patch_activations, channel, k);
    std::vector<PartSet> patterns;
    for (std::size_t idx : top.indices) {
        const auto& id = corpus.patches[idx].id;
        auto it = annotations.find(id);
        if (it == annotations.end()) {
            throw std::invalid_argument("patch " + id + " has no part annotation");
        }
        patterns.push_back(it->second);
    }
    return patterns;
}

} // namespace protosplit
