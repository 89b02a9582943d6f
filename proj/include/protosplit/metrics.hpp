#pragma once

#include "protosplit/core_model.hpp"

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace protosplit {

using PartSet = std::set<std::string>;

/// Ground-truth part labels overlapping each annotated patch, keyed by patch id.
using PartAnnotations = std::map<std::string, PartSet>;

/// 1/k where k is the number of distinct part combinations.
double pattern_purity(std::span<const PartSet> patch_patterns);

/// Share of patches containing the most frequent part label.
double part_purity(std::span<const PartSet> patch_parts);

/// Fraction of samples whose highest class score (ties to the smaller class) is the label.
double accuracy(const PrototypeBank& bank, std::span<const LabeledActivation> samples);

/// Image-level accuracy of `bank` over the corpus.
double corpus_accuracy(const PrototypeBank& bank, const Corpus& corpus);

/// Part sets of a channel's top-k patches (per-image dedup); unannotated patches raise.
std::vector<PartSet> channel_top_patterns(const Corpus& corpus, const Matrix& per_patch_activations,
                                          std::size_t channel, const PartAnnotations& annotations,
                                          std::size_t k = 10);

} // namespace protosplit
