#include "protosplit/pipeline.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>

namespace protosplit {

namespace {

std::vector<PatchRecord> patches_for(const Corpus& corpus, const std::vector<std::string>& ids) {
    std::vector<PatchRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto index = corpus.find_patch(id);
        if (!index) {
            throw SplitError("unknown patch id " + id);
        }
        out.push_back(corpus.patches[*index]);
    }
    return out;
}

std::vector<std::string> ids_of(const std::vector<PatchRecord>& patches) {
    std::vector<std::string> out;
    out.reserve(patches.size());
    for (const auto& p : patches) {
        out.push_back(p.id);
    }
    return out;
}

double mean_of(const std::vector<double>& values) {
    if (values.empty()) {
        return 0.0;
    }
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

ChannelPurity channel_purity(const Corpus& corpus, const Matrix& activations, std::size_t channel,
                             const PartAnnotations& annotations, std::size_t k) {
    const auto patterns = channel_top_patterns(corpus, activations, channel, annotations, k);
    return {channel, pattern_purity(patterns), part_purity(patterns)};
}

} // namespace

const PrototypeFinding& DetectionReport::finding(std::size_t prototype) const {
    if (prototype >= prototypes.size()) {
        throw std::out_of_range("prototype " + std::to_string(prototype) + " not in the report");
    }
    return prototypes[prototype];
}

DetectionReport run_detection(const Corpus& corpus, const PrototypeBank& bank,
                              const DetectionOptions& options) {
    const auto sets = collect_patch_sets(corpus, bank, options.patch_set_size, options.dedup_per_image);
    const auto result =
        find_optimal_threshold(sets, options.sweep, options.min_clique_size, options.workers);

    DetectionReport report;
    report.options = options;
    report.threshold = result.best_threshold;
    report.score = result.best_score;
    report.grid = result.grid;
    report.scores = result.scores;
    report.mean_flagged_dissimilarity = result.mean_flagged_dissimilarity();
    report.mean_dissimilarity = result.mean_dissimilarity();
    for (std::size_t d = 0; d < sets.size(); ++d) {
        const auto& set = sets[d];
        const auto& clique = result.reports[d];
        PrototypeFinding finding;
        finding.prototype = set.prototype;
        finding.flagged = clique.flagged;
        finding.dissimilarity = clique.dissimilarity;
        for (std::size_t index : set.patch_indices) {
            finding.patch_ids.push_back(corpus.patches[index].id);
        }
        for (std::size_t pos : clique.clique_a) {
            finding.concept_a.push_back(finding.patch_ids[pos]);
        }
        for (std::size_t pos : clique.clique_b) {
            finding.concept_b.push_back(finding.patch_ids[pos]);
        }
        report.prototypes.push_back(std::move(finding));
    }
    for (const auto& r : result.ranked) {
        report.ranking.push_back(r.prototype);
    }
    return report;
}

PatchLabel parse_patch_label(const std::string& text) {
    if (text == "A") {
        return PatchLabel::concept_a;
    }
    if (text == "B") {
        return PatchLabel::concept_b;
    }
    if (text == "SomethingElse") {
        return PatchLabel::something_else;
    }
    throw std::invalid_argument("unknown patch label '" + text + "' (expected A, B or SomethingElse)");
}

std::string to_string(PatchLabel label) {
    switch (label) {
    case PatchLabel::concept_a:
        return "A";
    case PatchLabel::concept_b:
        return "B";
    case PatchLabel::something_else:
        return "SomethingElse";
    }
    return "SomethingElse";
}

ConceptSets auto_concept_sets(const Corpus& corpus, const PrototypeBank& bank,
                              const PrototypeFinding& finding, std::size_t reference_size) {
    ConceptSets sets;
    sets.s1 = patches_for(corpus, finding.concept_a);
    sets.s2 = patches_for(corpus, finding.concept_b);
    std::vector<PatchRecord> labelled = sets.s1;
    labelled.insert(labelled.end(), sets.s2.begin(), sets.s2.end());
    const std::size_t size =
        reference_size != 0 ? reference_size : default_reference_size(sets.s1.size(), sets.s2.size());
    sets.sr = build_reference_set(corpus, bank, finding.prototype, size, labelled).patches;
    return sets;
}

ConceptSets concept_sets_from_labels(const Corpus& corpus, const PrototypeBank& bank,
                                     std::size_t prototype, const LabelMap& labels,
                                     std::size_t min_concept_size, bool something_else_to_reference,
                                     std::size_t reference_size) {
    ConceptSets sets;
    std::vector<PatchRecord> other;
    for (const auto& [id, label] : labels) {
        const auto index = corpus.find_patch(id);
        if (!index) {
            throw SplitError("unknown patch id " + id);
        }
        const auto& patch = corpus.patches[*index];
        switch (label) {
        case PatchLabel::concept_a:
            sets.s1.push_back(patch);
            break;
        case PatchLabel::concept_b:
            sets.s2.push_back(patch);
            break;
        case PatchLabel::something_else:
            other.push_back(patch);
            break;
        }
    }
    if (sets.s1.size() < min_concept_size) {
        throw SplitError("concept A below minimum size (" + std::to_string(sets.s1.size()) + " < " +
                         std::to_string(min_concept_size) + ")");
    }
    if (sets.s2.size() < min_concept_size) {
        throw SplitError("concept B below minimum size (" + std::to_string(sets.s2.size()) + " < " +
                         std::to_string(min_concept_size) + ")");
    }
    std::vector<PatchRecord> labelled = sets.s1;
    labelled.insert(labelled.end(), sets.s2.begin(), sets.s2.end());
    labelled.insert(labelled.end(), other.begin(), other.end());
    if (something_else_to_reference) {
        sets.sr = other;
    }
    const std::size_t size =
        reference_size != 0 ? reference_size : default_reference_size(sets.s1.size(), sets.s2.size());
    auto automatic = build_reference_set(corpus, bank, prototype, size, labelled).patches;
    sets.sr.insert(sets.sr.end(), automatic.begin(), automatic.end());
    return sets;
}

std::uint64_t split_seed(std::uint64_t seed, std::size_t prototype) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(prototype) + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

SplitOutcome split_and_finetune(const Corpus& corpus, const PrototypeBank& bank,
                                std::size_t prototype, ConceptSets sets,
                                const SplitHyperparams& hyper, const HeadFinetuneConfig& head,
                                std::size_t min_concept_size, std::uint64_t seed,
                                const SplitProgressCallback& progress) {
    SplitOutcome outcome;
    auto& record = outcome.record;
    record.prototype = prototype;
    record.concept_a = ids_of(sets.s1);
    record.concept_b = ids_of(sets.s2);
    record.reference = ids_of(sets.sr);
    if (prototype < bank.num_prototypes()) {
        record.kernel_before.assign(bank.kernels.row(prototype).begin(),
                                    bank.kernels.row(prototype).end());
        record.head_before.assign(bank.head.row(prototype).begin(), bank.head.row(prototype).end());
    }

    SplitSession session(bank, prototype, std::move(sets), hyper, min_concept_size);
    const auto result = session.run(seed, progress);
    record.new_channel = result.new_channel;
    record.status = to_string(session.status());
    record.steps = result.steps;
    record.accuracy = result.accuracy;
    record.final_loss = session.evaluate_loss();

    const auto dataset = labeled_pooled_activations(corpus, result.bank);
    auto tuned = reinit_and_finetune_head(result.bank, prototype, dataset, head, seed ^ 0xA5A5A5A5ULL);
    record.init_mean = tuned.init_mean;
    record.init_stddev = tuned.init_stddev;
    record.fallback_init = tuned.fallback_init;
    outcome.bank = std::move(tuned.bank);
    return outcome;
}

SplitReport auto_split(const Corpus& corpus, PrototypeBank& bank, const DetectionReport& detection,
                       std::size_t top_n, const SplitHyperparams& hyper,
                       const HeadFinetuneConfig& head, std::uint64_t seed) {
    SplitReport report;
    report.mode = "auto";
    report.seed = seed;
    report.base_prototypes = bank.num_prototypes();
    report.min_concept_size = detection.options.min_clique_size;
    report.hyper = hyper;
    report.head = head;
    report.accuracy_before = corpus_accuracy(bank, corpus);

    const std::size_t count = std::min(top_n, detection.ranking.size());
    for (std::size_t i = 0; i < count; ++i) {
        const auto& finding = detection.finding(detection.ranking[i]);
        try {
            auto sets = auto_concept_sets(corpus, bank, finding);
            auto outcome = split_and_finetune(corpus, bank, finding.prototype, std::move(sets), hyper,
                                              head, report.min_concept_size,
                                              split_seed(seed, finding.prototype));
            bank = std::move(outcome.bank);
            report.splits.push_back(std::move(outcome.record));
        } catch (const std::exception& e) {
            SplitRecord failed;
            failed.prototype = finding.prototype;
            failed.status = to_string(SessionStatus::failed);
            failed.error = e.what();
            report.splits.push_back(std::move(failed));
        }
    }
    report.accuracy_after = corpus_accuracy(bank, corpus);
    return report;
}

SplitReport labeled_split(const Corpus& corpus, PrototypeBank& bank,
                          const std::map<std::size_t, LabelMap>& labels,
                          const SplitHyperparams& hyper, const HeadFinetuneConfig& head,
                          std::size_t min_concept_size, bool something_else_to_reference,
                          std::uint64_t seed) {
    SplitReport report;
    report.mode = "labels";
    report.seed = seed;
    report.base_prototypes = bank.num_prototypes();
    report.min_concept_size = min_concept_size;
    report.hyper = hyper;
    report.head = head;
    report.accuracy_before = corpus_accuracy(bank, corpus);

    // All label sets are validated against the untouched bank before anything changes.
    std::vector<std::pair<std::size_t, ConceptSets>> pending;
    for (const auto& [prototype, map] : labels) {
        if (prototype >= bank.num_prototypes()) {
            throw SplitError("unknown prototype " + std::to_string(prototype));
        }
        pending.emplace_back(prototype, concept_sets_from_labels(corpus, bank, prototype, map,
                                                                 min_concept_size,
                                                                 something_else_to_reference));
        pending.back().second.validate(min_concept_size);
    }
    for (auto& [prototype, sets] : pending) {
        auto outcome = split_and_finetune(corpus, bank, prototype, std::move(sets), hyper, head,
                                          min_concept_size, split_seed(seed, prototype));
        bank = std::move(outcome.bank);
        report.splits.push_back(std::move(outcome.record));
    }
    report.accuracy_after = corpus_accuracy(bank, corpus);
    return report;
}

PrototypeBank reconstruct_original(const PrototypeBank& bank, const SplitReport& report) {
    const std::size_t base = report.base_prototypes;
    if (base > bank.num_prototypes()) {
        throw std::invalid_argument("split report describes more prototypes than the bank holds");
    }
    PrototypeBank original;
    original.class_names = bank.class_names;
    original.kernels = Matrix(base, bank.feature_width());
    original.head = Matrix(base, bank.num_classes());
    for (std::size_t d = 0; d < base; ++d) {
        std::copy(bank.kernels.row(d).begin(), bank.kernels.row(d).end(), original.kernels.row(d).begin());
        std::copy(bank.head.row(d).begin(), bank.head.row(d).end(), original.head.row(d).begin());
    }
    // Later splits of the same prototype saw an already modified row, so restore in reverse.
    for (auto it = report.splits.rbegin(); it != report.splits.rend(); ++it) {
        if (it->kernel_before.empty() || it->prototype >= base) {
            continue;
        }
        if (it->kernel_before.size() != bank.feature_width() || it->head_before.size() != bank.num_classes()) {
            throw ShapeError("split record width", bank.feature_width(), it->kernel_before.size());
        }
        std::copy(it->kernel_before.begin(), it->kernel_before.end(),
                  original.kernels.row(it->prototype).begin());
        std::copy(it->head_before.begin(), it->head_before.end(), original.head.row(it->prototype).begin());
    }
    return original;
}

MetricsReport compute_metrics(const Corpus& corpus, const PrototypeBank& before,
                              const PrototypeBank& after, const SplitReport& report,
                              const PartAnnotations& annotations, std::size_t top_k) {
    MetricsReport metrics;
    metrics.top_k = top_k;
    metrics.accuracy_before = corpus_accuracy(before, corpus);
    metrics.accuracy_after = corpus_accuracy(after, corpus);
    metrics.accuracy_delta_points = 100.0 * (metrics.accuracy_after - metrics.accuracy_before);

    const Matrix acts_before = corpus_activations(corpus, before);
    const Matrix acts_after = corpus_activations(corpus, after);

    std::vector<double> pp_before_all, part_before_all, pp_after_all, part_after_all;
    for (std::size_t d = 0; d < before.num_prototypes(); ++d) {
        const auto c = channel_purity(corpus, acts_before, d, annotations, top_k);
        pp_before_all.push_back(c.pattern_purity);
        part_before_all.push_back(c.part_purity);
    }
    for (std::size_t d = 0; d < after.num_prototypes(); ++d) {
        const auto c = channel_purity(corpus, acts_after, d, annotations, top_k);
        pp_after_all.push_back(c.pattern_purity);
        part_after_all.push_back(c.part_purity);
    }

    std::vector<double> pp_before_split, part_before_split, pp_after_split, part_after_split;
    std::size_t improved = 0;
    std::size_t channels = 0;
    for (const auto& record : report.splits) {
        if (record.kernel_before.empty() || record.new_channel >= after.num_prototypes() ||
            record.prototype >= before.num_prototypes()) {
            continue;
        }
        SplitMetrics s;
        s.prototype = record.prototype;
        s.new_channel = record.new_channel;
        s.before = channel_purity(corpus, acts_before, record.prototype, annotations, top_k);
        s.after_original = channel_purity(corpus, acts_after, record.prototype, annotations, top_k);
        s.after_new = channel_purity(corpus, acts_after, record.new_channel, annotations, top_k);
        pp_before_split.push_back(s.before.pattern_purity);
        part_before_split.push_back(s.before.part_purity);
        for (const auto* c : {&s.after_original, &s.after_new}) {
            pp_after_split.push_back(c->pattern_purity);
            part_after_split.push_back(c->part_purity);
            improved += c->pattern_purity > s.before.pattern_purity ? 1 : 0;
            ++channels;
        }
        metrics.splits.push_back(s);
    }
    metrics.pattern_purity = {mean_of(pp_before_split), mean_of(pp_after_split), mean_of(pp_before_all),
                              mean_of(pp_after_all)};
    metrics.part_purity = {mean_of(part_before_split), mean_of(part_after_split),
                           mean_of(part_before_all), mean_of(part_after_all)};
    metrics.channels_more_consistent =
        channels == 0 ? 0.0 : static_cast<double>(improved) / static_cast<double>(channels);
    return metrics;
}

// ---- JSON ----

json to_json(const DetectionReport& report) {
    json findings = json::array();
    for (const auto& f : report.prototypes) {
        findings.push_back({{"prototype", f.prototype},
                            {"flagged", f.flagged},
                            {"dissimilarity", f.dissimilarity},
                            {"patches", f.patch_ids},
                            {"concept_a", f.concept_a},
                            {"concept_b", f.concept_b}});
    }
    const auto& o = report.options;
    return {{"kind", "detection_report"},
            {"schema_version", report_schema_version},
            {"options",
             {{"patch_set_size", o.patch_set_size},
              {"dedup_per_image", o.dedup_per_image},
              {"min_clique_size", o.min_clique_size},
              {"sweep", {{"min", o.sweep.min}, {"max", o.sweep.max}, {"step", o.sweep.step}}}}},
            {"threshold", report.threshold},
            {"score", report.score},
            {"grid", report.grid},
            {"scores", report.scores},
            {"ranking", report.ranking},
            {"mean_flagged_dissimilarity", report.mean_flagged_dissimilarity},
            {"mean_dissimilarity", report.mean_dissimilarity},
            {"prototypes", findings}};
}

DetectionReport detection_report_from_json(const json& j) {
    if (j.value("kind", std::string{}) != "detection_report") {
        throw std::invalid_argument("not a detection report");
    }
    DetectionReport report;
    const auto& o = j.at("options");
    report.options.patch_set_size = o.at("patch_set_size").get<std::size_t>();
    report.options.dedup_per_image = o.at("dedup_per_image").get<bool>();
    report.options.min_clique_size = o.at("min_clique_size").get<std::size_t>();
    report.options.sweep = {o.at("sweep").at("min").get<double>(), o.at("sweep").at("max").get<double>(),
                            o.at("sweep").at("step").get<double>()};
    report.threshold = j.at("threshold").get<double>();
    report.score = j.at("score").get<double>();
    report.grid = j.at("grid").get<std::vector<double>>();
    report.scores = j.at("scores").get<std::vector<double>>();
    report.ranking = j.at("ranking").get<std::vector<std::size_t>>();
    report.mean_flagged_dissimilarity = j.at("mean_flagged_dissimilarity").get<double>();
    report.mean_dissimilarity = j.at("mean_dissimilarity").get<double>();
    for (const auto& f : j.at("prototypes")) {
        PrototypeFinding finding;
        finding.prototype = f.at("prototype").get<std::size_t>();
        finding.flagged = f.at("flagged").get<bool>();
        finding.dissimilarity = f.at("dissimilarity").get<double>();
        finding.patch_ids = f.at("patches").get<std::vector<std::string>>();
        finding.concept_a = f.at("concept_a").get<std::vector<std::string>>();
        finding.concept_b = f.at("concept_b").get<std::vector<std::string>>();
        report.prototypes.push_back(std::move(finding));
    }
    for (std::size_t d = 0; d < report.prototypes.size(); ++d) {
        if (report.prototypes[d].prototype != d) {
            throw std::invalid_argument("detection report prototypes out of order");
        }
    }
    return report;
}

json to_json(const SplitHyperparams& h) {
    return {{"learning_rate", h.learning_rate},
            {"weight_decay", h.weight_decay},
            {"batch_size", h.batch_size},
            {"noise_sigma", h.noise_sigma},
            {"epsilon", h.epsilon},
            {"alpha", h.alpha},
            {"kappa", h.kappa},
            {"accuracy_target", h.accuracy_target},
            {"loss_target", h.loss_target},
            {"patience", h.patience},
            {"max_steps", h.max_steps},
            {"eval_interval", h.eval_interval},
            {"stratified_batches", h.stratified_batches},
            {"duplicate_jitter", h.duplicate_jitter}};
}

json to_json(const HeadFinetuneConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"epsilon", c.epsilon}};
}

void apply_overrides(const json& j, SplitHyperparams& hyper, HeadFinetuneConfig& head) {
    if (!j.is_object()) {
        throw std::invalid_argument("config must be a JSON object");
    }
    json merged = to_json(hyper);
    json merged_head = to_json(head);
    for (const auto& [key, value] : j.items()) {
        if (key == "head_finetune") {
            for (const auto& [hk, hv] : value.items()) {
                if (!merged_head.contains(hk)) {
                    throw std::invalid_argument("unknown head_finetune key '" + hk + "'");
                }
                merged_head[hk] = hv;
            }
        } else if (merged.contains(key)) {
            merged[key] = value;
        } else {
            throw std::invalid_argument("unknown config key '" + key + "'");
        }
    }
    SplitHyperparams h;
    h.learning_rate = merged.at("learning_rate").get<double>();
    h.weight_decay = merged.at("weight_decay").get<double>();
    h.batch_size = merged.at("batch_size").get<std::size_t>();
    h.noise_sigma = merged.at("noise_sigma").get<double>();
    h.epsilon = merged.at("epsilon").get<double>();
    h.alpha = merged.at("alpha").get<double>();
    h.kappa = merged.at("kappa").get<double>();
    h.accuracy_target = merged.at("accuracy_target").get<double>();
    h.loss_target = merged.at("loss_target").get<double>();
    h.patience = merged.at("patience").get<std::size_t>();
    h.max_steps = merged.at("max_steps").get<std::size_t>();
    h.eval_interval = merged.at("eval_interval").get<std::size_t>();
    h.stratified_batches = merged.at("stratified_batches").get<bool>();
    h.duplicate_jitter = merged.at("duplicate_jitter").get<double>();
    h.validate();
    HeadFinetuneConfig c;
    c.epochs = merged_head.at("epochs").get<std::size_t>();
    c.batch_size = merged_head.at("batch_size").get<std::size_t>();
    c.learning_rate = merged_head.at("learning_rate").get<double>();
    c.epsilon = merged_head.at("epsilon").get<double>();
    hyper = h;
    head = c;
}

json to_json(const ConceptAccuracy& a) {
    return {{"s1", a.s1}, {"s2", a.s2}, {"sr", a.sr}, {"minimum", a.minimum()}};
}

json to_json(const SplitRecord& r) {
    json j = {{"prototype", r.prototype},
              {"new_channel", r.new_channel},
              {"status", r.status},
              {"steps", r.steps},
              {"accuracy", to_json(r.accuracy)},
              {"final_loss", r.final_loss},
              {"concept_a", r.concept_a},
              {"concept_b", r.concept_b},
              {"reference", r.reference},
              {"kernel_before", r.kernel_before},
              {"head_before", r.head_before},
              {"head_init", {{"mean", r.init_mean}, {"stddev", r.init_stddev}, {"fallback", r.fallback_init}}}};
    if (!r.error.empty()) {
        j["error"] = r.error;
    }
    return j;
}

json to_json(const SplitReport& report) {
    json splits = json::array();
    for (const auto& r : report.splits) {
        splits.push_back(to_json(r));
    }
    json hyper = to_json(report.hyper);
    hyper["head_finetune"] = to_json(report.head);
    return {{"kind", "split_report"},
            {"schema_version", report_schema_version},
            {"mode", report.mode},
            {"seed", report.seed},
            {"base_prototypes", report.base_prototypes},
            {"min_concept_size", report.min_concept_size},
            {"hyperparameters", hyper},
            {"accuracy_before", report.accuracy_before},
            {"accuracy_after", report.accuracy_after},
            {"splits", splits}};
}

SplitReport split_report_from_json(const json& j) {
    if (j.value("kind", std::string{}) != "split_report") {
        throw std::invalid_argument("not a split report");
    }
    SplitReport report;
    report.mode = j.at("mode").get<std::string>();
    report.seed = j.at("seed").get<std::uint64_t>();
    report.base_prototypes = j.at("base_prototypes").get<std::size_t>();
    report.min_concept_size = j.at("min_concept_size").get<std::size_t>();
    apply_overrides(j.at("hyperparameters"), report.hyper, report.head);
    report.accuracy_before = j.at("accuracy_before").get<double>();
    report.accuracy_after = j.at("accuracy_after").get<double>();
    for (const auto& s : j.at("splits")) {
        SplitRecord r;
        r.prototype = s.at("prototype").get<std::size_t>();
        r.new_channel = s.at("new_channel").get<std::size_t>();
        r.status = s.at("status").get<std::string>();
        r.steps = s.at("steps").get<std::size_t>();
        r.accuracy.s1 = s.at("accuracy").at("s1").get<double>();
        r.accuracy.s2 = s.at("accuracy").at("s2").get<double>();
        r.accuracy.sr = s.at("accuracy").at("sr").get<double>();
        r.final_loss = s.at("final_loss").get<double>();
        r.concept_a = s.at("concept_a").get<std::vector<std::string>>();
        r.concept_b = s.at("concept_b").get<std::vector<std::string>>();
        r.reference = s.at("reference").get<std::vector<std::string>>();
        r.kernel_before = s.at("kernel_before").get<std::vector<double>>();
        r.head_before = s.at("head_before").get<std::vector<double>>();
        r.init_mean = s.at("head_init").at("mean").get<double>();
        r.init_stddev = s.at("head_init").at("stddev").get<double>();
        r.fallback_init = s.at("head_init").at("fallback").get<bool>();
        r.error = s.value("error", std::string{});
        report.splits.push_back(std::move(r));
    }
    return report;
}

json to_json(const MetricsReport& m) {
    auto purity = [](const ChannelPurity& c) {
        return json{{"channel", c.channel}, {"pattern_purity", c.pattern_purity}, {"part_purity", c.part_purity}};
    };
    auto means = [](const PurityMeans& p) {
        return json{{"split_channels_before", p.split_channels_before},
                    {"split_channels_after", p.split_channels_after},
                    {"all_channels_before", p.all_channels_before},
                    {"all_channels_after", p.all_channels_after}};
    };
    json splits = json::array();
    for (const auto& s : m.splits) {
        splits.push_back({{"prototype", s.prototype},
                          {"new_channel", s.new_channel},
                          {"before", purity(s.before)},
                          {"after_original", purity(s.after_original)},
                          {"after_new", purity(s.after_new)}});
    }
    return {{"kind", "metrics_report"},
            {"schema_version", report_schema_version},
            {"top_k", m.top_k},
            {"accuracy_before", m.accuracy_before},
            {"accuracy_after", m.accuracy_after},
            {"accuracy_delta_points", m.accuracy_delta_points},
            {"pattern_purity", means(m.pattern_purity)},
            {"part_purity", means(m.part_purity)},
            {"channels_more_consistent", m.channels_more_consistent},
            {"splits", splits}};
}

std::map<std::size_t, LabelMap> labels_from_json(const json& j) {
    if (!j.is_object()) {
        throw std::invalid_argument("labels file must map prototype ids to label objects");
    }
    std::map<std::size_t, LabelMap> out;
    for (const auto& [key, value] : j.items()) {
        std::size_t consumed = 0;
        const auto prototype = std::stoul(key, &consumed);
        if (consumed != key.size()) {
            throw std::invalid_argument("prototype key '" + key + "' is not an integer");
        }
        LabelMap labels;
        for (const auto& [patch, label] : value.items()) {
            labels.emplace(patch, parse_patch_label(label.get<std::string>()));
        }
        out.emplace(prototype, std::move(labels));
    }
    return out;
}

} // namespace protosplit
