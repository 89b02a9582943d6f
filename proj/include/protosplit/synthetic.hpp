#pragma once

#include "protosplit/core_model.hpp"
#include "protosplit/ground_truth.hpp"
#include "protosplit/splitting.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

namespace protosplit {

struct SynthConfig {
    std::size_t feature_width = 32;
    std::size_t prototypes = 64;
    std::size_t classes = 10;
    std::size_t parts = 16;
    std::size_t patches_per_part = 40;   // patches drawn around each concept centre
    std::size_t entangled_count = 8;
    double cluster_spread = 0.05;        // expected norm of the angular perturbation
    std::uint64_t seed = 0;

    std::uint32_t grid_h = 2;
    std::uint32_t grid_w = 4;
    double feature_scale = 4.0;          // norm of a planted patch feature
    double kernel_scale = 2.0;
    std::size_t planted_per_concept = 5;
    double max_coherence = 0.4;

    void validate() const;
};

struct SyntheticWorkbench {
    PrototypeBank bank;
    Corpus corpus;
    GroundTruth truth;
    std::map<std::string, std::string> thumbnails;   // thumbnail_ref -> bytes
};

/// Builds a bank, corpus and ground truth with `entangled_count` planted two-concept prototypes.
/// Deterministic per seed.
SyntheticWorkbench generate_bank(const SynthConfig& config);

/// S1/S2 from the planted patches of an entangled prototype, Sr from other prototypes' patches.
ConceptSets oracle_labels(const SyntheticWorkbench& workbench, std::size_t prototype,
                          std::size_t reference_size = 0);

} // namespace protosplit
