#pragma once

#include "protosplit/core_model.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace protosplit {

/// Raised when a split cannot start or has to abort.
class SplitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Concept A (S1), concept B (S2) and the reference set (Sr).
struct ConceptSets {
    std::vector<PatchRecord> s1;
    std::vector<PatchRecord> s2;
    std::vector<PatchRecord> sr;

    /// Disjointness by (image_id, location) and the minimum concept size.
    void validate(std::size_t min_concept_size) const;
    bool operator==(const ConceptSets&) const = default;
};

enum class Membership { concept_a, concept_b, reference };

struct SplitHyperparams {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    std::size_t batch_size = 10;
    double noise_sigma = 0.05;
    double epsilon = 1e-8;
    double alpha = 2.0;
    double kappa = 0.1;
    double accuracy_target = 0.999;
    double loss_target = 0.02;
    std::size_t patience = 10;
    std::size_t max_steps = 5000;
    std::size_t eval_interval = 10;
    bool stratified_batches = false;
    double duplicate_jitter = 0.0;

    void validate() const;
    /// Largest activation the deactivation hinge tolerates: 1 - exp(-kappa).
    double deactivation_bound() const;
};

/// Appends a copy of kernel `prototype` as the last row.
PrototypeBank duplicate_kernel(const PrototypeBank& bank, std::size_t prototype);

/// Appends a copy of head row `prototype` as the last row.
Matrix extend_head(const Matrix& head, std::size_t prototype);

/// Loss terms on a single softmax activation.
double activation_loss(double activation, double epsilon);
double deactivation_loss(double activation, double kappa, double epsilon);

/// Per-patch splitting loss; `split_channel` is e, the duplicate is the last entry of p.
double split_loss(Membership membership, std::span<const double> activations,
                  std::size_t split_channel, const SplitHyperparams& hyper);

struct KernelGradients {
    std::vector<double> original;    // d loss / d kernel e
    std::vector<double> duplicate;   // d loss / d kernel D+1
    double loss = 0.0;
};

/// Analytic gradient of split_loss(softmax(bank_plus logits)) w.r.t. the two free kernels.
KernelGradients split_loss_gradient(std::span<const double> feature, const PrototypeBank& bank_plus,
                                    std::size_t split_channel, Membership membership,
                                    const SplitHyperparams& hyper);

struct AdamState {
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    std::size_t step = 0;
};

struct AdamConfig {
    double learning_rate = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;   // decoupled
};

/// Bias-corrected Adam step with decoupled weight decay, in place.
void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config);

struct ConceptAccuracy {
    double s1 = 1.0;
    double s2 = 1.0;
    double sr = 1.0;
    bool s1_vacuous = false;
    bool s2_vacuous = false;
    bool sr_vacuous = false;

    double minimum() const;
};

/// S1 counts when e is the argmax and the duplicate stays inside the hinge-free zone; S2
/// symmetrically; Sr when both channels stay inside it.
ConceptAccuracy per_concept_accuracy(const ConceptSets& sets, const PrototypeBank& bank_plus,
                                     std::size_t split_channel, double kappa);

struct ReferenceSet {
    std::vector<PatchRecord> patches;
    bool short_of_request = false;
};

/// Patches that peak on other in-use prototypes, taken round-robin from each prototype's most
/// activated patches. `bank` is the bank before duplication.
ReferenceSet build_reference_set(const Corpus& corpus, const PrototypeBank& bank,
                                 std::size_t split_channel, std::size_t size,
                                 std::span<const PatchRecord> exclude = {});

/// max(20, |S1| + |S2|).
std::size_t default_reference_size(std::size_t concept_a_size, std::size_t concept_b_size);

enum class SessionStatus { pending, running, converged, budget_exhausted, failed };

std::string to_string(SessionStatus status);

struct SplitProgress {
    std::size_t step = 0;
    double loss = 0.0;
    ConceptAccuracy accuracy;
};

struct SplitResult {
    std::size_t prototype = 0;
    std::size_t new_channel = 0;
    std::vector<double> kernel_original;
    std::vector<double> kernel_duplicate;
    PrototypeBank bank;   // D+1 kernels; head rows are plain copies until fine-tuned
    ConceptAccuracy accuracy;
    std::size_t steps = 0;
    bool converged = false;
};

class SplitSession {
public:
    using ProgressCallback = std::function<void(const SplitProgress&)>;

    /// Builds the duplicated bank; throws SplitError when the sets are invalid.
    SplitSession(const PrototypeBank& bank, std::size_t prototype, ConceptSets sets,
                 SplitHyperparams hyper, std::size_t min_concept_size = 2);

    SplitResult run(std::uint64_t seed, const ProgressCallback& progress = {});

    SessionStatus status() const { return status_; }
    std::size_t prototype() const { return prototype_; }
    const ConceptSets& sets() const { return sets_; }
    const SplitHyperparams& hyper() const { return hyper_; }
    const PrototypeBank& bank_plus() const { return bank_plus_; }

    /// Minibatch loss per optimizer step.
    const std::vector<double>& loss_history() const { return loss_history_; }
    /// Full clean-set loss and accuracy at each evaluation.
    const std::vector<double>& eval_loss_history() const { return eval_loss_history_; }
    const std::vector<ConceptAccuracy>& accuracy_history() const { return accuracy_history_; }

    /// Mean per-patch loss over all three sets without noise.
    double evaluate_loss() const;

private:
    void advance(SessionStatus next);

    std::size_t prototype_;
    ConceptSets sets_;
    SplitHyperparams hyper_;
    PrototypeBank bank_plus_;
    AdamState original_state_;
    AdamState duplicate_state_;
    SessionStatus status_ = SessionStatus::pending;
    std::vector<double> loss_history_;
    std::vector<double> eval_loss_history_;
    std::vector<ConceptAccuracy> accuracy_history_;
};

/// Convenience wrapper matching the session lifecycle.
SplitResult run_split(SplitSession& session, std::uint64_t seed,
                      const SplitSession::ProgressCallback& progress = {});

struct HeadFinetuneConfig {
    std::size_t epochs = 1;
    std::size_t batch_size = 10;
    double learning_rate = 0.05;   // Adam
    double epsilon = 1e-8;
};

struct HeadFinetuneResult {
    PrototypeBank bank;
    double init_mean = 0.0;
    double init_stddev = 0.0;
    bool fallback_init = false;
};

/// Redraws head rows `prototype` and the last row from a normal fitted on the positive entries of
/// every other row, then fine-tunes only those rows on the labelled pooled activations.
HeadFinetuneResult reinit_and_finetune_head(const PrototypeBank& bank_plus, std::size_t prototype,
                                            std::span<const LabeledActivation> dataset,
                                            const HeadFinetuneConfig& config, std::uint64_t seed);

} // namespace protosplit
