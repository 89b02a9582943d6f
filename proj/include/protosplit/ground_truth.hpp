#pragma once

#include "protosplit/metrics.hpp"

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace protosplit {

/// Planted structure of a generated bank: which prototypes mix two concepts, which concept every
/// patch was drawn from, and the part pattern of each concept.
struct GroundTruth {
    struct Prototype {
        bool entangled = false;
        std::vector<std::size_t> concepts;       // one, or two when entangled
        std::vector<std::string> planted_a;      // patch ids, entangled only
        std::vector<std::string> planted_b;
        bool operator==(const Prototype&) const = default;
    };

    std::vector<Prototype> prototypes;
    std::vector<PartSet> concept_patterns;
    std::vector<std::size_t> concept_owner;
    std::map<std::string, std::size_t> patch_concept;

    std::vector<std::size_t> entangled_prototypes() const;
    std::optional<std::size_t> concept_of(const std::string& patch_id) const;
    /// Part annotation of every patch, derived from its concept.
    PartAnnotations annotations() const;

    bool operator==(const GroundTruth&) const = default;
};

} // namespace protosplit
