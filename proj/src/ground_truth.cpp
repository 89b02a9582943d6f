#include "protosplit/ground_truth.hpp"

namespace protosplit {

std::vector<std::size_t> GroundTruth::entangled_prototypes() const {
    std::vector<std::size_t> out;
    for (std::size_t d = 0; d < prototypes.size(); ++d) {
        if (prototypes[d].entangled) {
            out.push_back(d);
        }
    }
    return out;
}

std::optional<std::size_t> GroundTruth::concept_of(const std::string& patch_id) const {
    auto it = patch_concept.find(patch_id);
    if (it == patch_concept.end()) {
        return std::nullopt;
    }
    return it->second;
}

PartAnnotations GroundTruth::annotations() const {
    PartAnnotations out;
    for (const auto& [patch, concept_id] : patch_concept) {
        out.emplace(patch, concept_patterns.at(concept_id));
    }
    return out;
}

} // namespace protosplit
