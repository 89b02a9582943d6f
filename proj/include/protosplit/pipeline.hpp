#pragma once

#include "protosplit/core_model.hpp"
#include "protosplit/detection.hpp"
#include "protosplit/metrics.hpp"
#include "protosplit/splitting.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace protosplit {

using nlohmann::json;

inline constexpr int report_schema_version = 1;

struct DetectionOptions {
    std::size_t patch_set_size = 10;
    bool dedup_per_image = true;
    ThresholdSweep sweep;
    std::size_t min_clique_size = 2;
    std::size_t workers = 1;
};

/// One prototype at the selected threshold, with its cliques expressed as patch ids.
struct PrototypeFinding {
    std::size_t prototype = 0;
    bool flagged = false;
    double dissimilarity = 0.0;
    std::vector<std::string> patch_ids;     // P_d, descending activation
    std::vector<std::string> concept_a;
    std::vector<std::string> concept_b;

    bool operator==(const PrototypeFinding&) const = default;
};

struct DetectionReport {
    DetectionOptions options;
    double threshold = 0.0;
    double score = 0.0;
    std::vector<double> grid;
    std::vector<double> scores;
    std::vector<PrototypeFinding> prototypes;   // prototype order
    std::vector<std::size_t> ranking;           // flagged prototypes, dissimilarity descending
    double mean_flagged_dissimilarity = 0.0;
    double mean_dissimilarity = 0.0;

    const PrototypeFinding& finding(std::size_t prototype) const;
};

DetectionReport run_detection(const Corpus& corpus, const PrototypeBank& bank,
                              const DetectionOptions& options);

enum class PatchLabel { concept_a, concept_b, something_else };

using LabelMap = std::map<std::string, PatchLabel>;

PatchLabel parse_patch_label(const std::string& text);
std::string to_string(PatchLabel label);

/// S1/S2 from the two cliques of a finding; Sr gathered automatically.
ConceptSets auto_concept_sets(const Corpus& corpus, const PrototypeBank& bank,
                              const PrototypeFinding& finding, std::size_t reference_size = 0);

/// A -> S1, B -> S2, Something Else -> Sr (or dropped), Sr topped up automatically.
/// Throws SplitError naming the concept that misses the minimum size.
ConceptSets concept_sets_from_labels(const Corpus& corpus, const PrototypeBank& bank,
                                     std::size_t prototype, const LabelMap& labels,
                                     std::size_t min_concept_size, bool something_else_to_reference,
                                     std::size_t reference_size = 0);

struct SplitRecord {
    std::size_t prototype = 0;
    std::size_t new_channel = 0;
    std::string status;
    std::size_t steps = 0;
    ConceptAccuracy accuracy;
    double final_loss = 0.0;
    std::vector<std::string> concept_a;
    std::vector<std::string> concept_b;
    std::vector<std::string> reference;
    std::vector<double> kernel_before;
    std::vector<double> head_before;
    double init_mean = 0.0;
    double init_stddev = 0.0;
    bool fallback_init = false;
    std::string error;
};

struct SplitOutcome {
    SplitRecord record;
    PrototypeBank bank;   // committed bank (D+1 prototypes) when the split ran
};

using SplitProgressCallback = std::function<void(const SplitProgress&)>;

/// Splits `prototype` and re-initialises plus fine-tunes the two affected head rows.
SplitOutcome split_and_finetune(const Corpus& corpus, const PrototypeBank& bank,
                                std::size_t prototype, ConceptSets sets,
                                const SplitHyperparams& hyper, const HeadFinetuneConfig& head,
                                std::size_t min_concept_size, std::uint64_t seed,
                                const SplitProgressCallback& progress = {});

/// Per-split seed derived from the run seed.
std::uint64_t split_seed(std::uint64_t seed, std::size_t prototype);

struct SplitReport {
    std::string mode;   // "auto" or "labels"
    std::uint64_t seed = 0;
    std::size_t base_prototypes = 0;
    std::size_t min_concept_size = 2;
    SplitHyperparams hyper;
    HeadFinetuneConfig head;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    std::vector<SplitRecord> splits;
};

/// Splits the top `top_n` ranked prototypes one after another, updating `bank` in place.
SplitReport auto_split(const Corpus& corpus, PrototypeBank& bank, const DetectionReport& detection,
                       std::size_t top_n, const SplitHyperparams& hyper,
                       const HeadFinetuneConfig& head, std::uint64_t seed);

/// Splits every prototype named in `labels` (prototype -> patch labels).
SplitReport labeled_split(const Corpus& corpus, PrototypeBank& bank,
                          const std::map<std::size_t, LabelMap>& labels,
                          const SplitHyperparams& hyper, const HeadFinetuneConfig& head,
                          std::size_t min_concept_size, bool something_else_to_reference,
                          std::uint64_t seed);

/// Rebuilds the pre-split bank from a post-split bank and its split report.
PrototypeBank reconstruct_original(const PrototypeBank& bank, const SplitReport& report);

struct ChannelPurity {
    std::size_t channel = 0;
    double pattern_purity = 0.0;
    double part_purity = 0.0;
};

struct SplitMetrics {
    std::size_t prototype = 0;
    std::size_t new_channel = 0;
    ChannelPurity before;
    ChannelPurity after_original;
    ChannelPurity after_new;
};

struct PurityMeans {
    double split_channels_before = 0.0;
    double split_channels_after = 0.0;
    double all_channels_before = 0.0;
    double all_channels_after = 0.0;
};

struct MetricsReport {
    std::size_t top_k = 10;
    double accuracy_before = 0.0;
    double accuracy_after = 0.0;
    double accuracy_delta_points = 0.0;
    PurityMeans pattern_purity;
    PurityMeans part_purity;
    std::vector<SplitMetrics> splits;
    /// Share of post-split channels whose pattern purity exceeds the pre-split value.
    double channels_more_consistent = 0.0;
};

MetricsReport compute_metrics(const Corpus& corpus, const PrototypeBank& before,
                              const PrototypeBank& after, const SplitReport& report,
                              const PartAnnotations& annotations, std::size_t top_k = 10);

json to_json(const DetectionReport& report);
DetectionReport detection_report_from_json(const json& j);
json to_json(const SplitHyperparams& hyper);
json to_json(const HeadFinetuneConfig& head);
/// Overrides fields present in `j`; unknown keys raise std::invalid_argument.
void apply_overrides(const json& j, SplitHyperparams& hyper, HeadFinetuneConfig& head);
json to_json(const ConceptAccuracy& accuracy);
json to_json(const SplitRecord& record);
json to_json(const SplitReport& report);
SplitReport split_report_from_json(const json& j);
json to_json(const MetricsReport& report);

/// Labels file: {"<prototype>": {"<patch id>": "A" | "B" | "SomethingElse"}}.
std::map<std::size_t, LabelMap> labels_from_json(const json& j);

} // namespace protosplit
