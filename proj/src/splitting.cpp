#include "protosplit/splitting.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

namespace protosplit {

namespace {

using PatchKey = std::tuple<std::string, std::uint32_t, std::uint32_t>;

PatchKey key_of(const PatchRecord& patch) {
    return {patch.image_id, patch.location.h, patch.location.w};
}

std::set<PatchKey> keys_of(std::span<const PatchRecord> patches) {
    std::set<PatchKey> keys;
    for (const auto& p : patches) {
        keys.insert(key_of(p));
    }
    return keys;
}

void check_channel(const PrototypeBank& bank, std::size_t prototype) {
    if (prototype >= bank.num_prototypes()) {
        throw std::out_of_range("prototype " + std::to_string(prototype) + " outside a bank of " +
                                std::to_string(bank.num_prototypes()));
    }
}

} // namespace

void ConceptSets::validate(std::size_t min_concept_size) const {
    if (s1.size() < min_concept_size) {
        throw SplitError("concept A below minimum size (" + std::to_string(s1.size()) + " < " +
                         std::to_string(min_concept_size) + ")");
    }
    if (s2.size() < min_concept_size) {
        throw SplitError("concept B below minimum size (" + std::to_string(s2.size()) + " < " +
                         std::to_string(min_concept_size) + ")");
    }
    const auto a = keys_of(s1);
    const auto b = keys_of(s2);
    if (a.size() != s1.size() || b.size() != s2.size()) {
        throw SplitError("a concept set lists the same patch twice");
    }
    for (const auto& k : b) {
        if (a.contains(k)) {
            throw SplitError("concept sets A and B overlap at image " + std::get<0>(k));
        }
    }
    for (const auto& p : sr) {
        const auto k = key_of(p);
        if (a.contains(k) || b.contains(k)) {
            throw SplitError("reference set overlaps a concept set at patch " + p.id);
        }
    }
}

void SplitHyperparams::validate() const {
    const double positives[] = {learning_rate, weight_decay, noise_sigma, epsilon,
                                alpha,         kappa,        accuracy_target, loss_target};
    for (double v : positives) {
        if (!(v > 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("split hyperparameters must be positive and finite");
        }
    }
    if (batch_size == 0 || patience == 0 || max_steps == 0 || eval_interval == 0) {
        throw std::invalid_argument("batch size, patience, max_steps and eval_interval must be > 0");
    }
    if (kappa >= -std::log(0.5)) {
        throw std::invalid_argument("kappa must stay below ln 2");
    }
    if (accuracy_target > 1.0) {
        throw std::invalid_argument("accuracy target above 1");
    }
    if (duplicate_jitter < 0.0) {
        throw std::invalid_argument("negative duplicate jitter");
    }
}

double SplitHyperparams::deactivation_bound() const {
    return 1.0 - std::exp(-kappa);
}

PrototypeBank duplicate_kernel(const PrototypeBank& bank, std::size_t prototype) {
    check_channel(bank, prototype);
    PrototypeBank out = bank;
    const std::vector<double> copy(bank.kernels.row(prototype).begin(),
                                   bank.kernels.row(prototype).end());
    out.kernels.append_row(copy);
    out.head = extend_head(bank.head, prototype);
    return out;
}

Matrix extend_head(const Matrix& head, std::size_t prototype) {
    if (prototype >= head.rows()) {
        throw std::out_of_range("head row " + std::to_string(prototype) + " out of range");
    }
    Matrix out = head;
    const std::vector<double> copy(head.row(prototype).begin(), head.row(prototype).end());
    out.append_row(copy);
    return out;
}

double activation_loss(double activation, double epsilon) {
    return -std::log(activation + epsilon);
}

double deactivation_loss(double activation, double kappa, double epsilon) {
    return std::max(0.0, -std::log(1.0 - activation + epsilon) - kappa);
}

double split_loss(Membership membership, std::span<const double> activations,
                  std::size_t split_channel, const SplitHyperparams& hyper) {
    if (activations.size() < 2 || split_channel >= activations.size() - 1) {
        throw std::out_of_range("split channel must precede the duplicate channel");
    }
    const double pe = activations[split_channel];
    const double pn = activations.back();
    switch (membership) {
    case Membership::concept_a:
        return activation_loss(pe, hyper.epsilon);
    case Membership::concept_b:
        return activation_loss(pn, hyper.epsilon);
    case Membership::reference:
        return hyper.alpha * (deactivation_loss(pe, hyper.kappa, hyper.epsilon) +
                              deactivation_loss(pn, hyper.kappa, hyper.epsilon));
    }
    return 0.0;
}

KernelGradients split_loss_gradient(std::span<const double> feature, const PrototypeBank& bank_plus,
                                    std::size_t split_channel, Membership membership,
                                    const SplitHyperparams& hyper) {
    const std::size_t channels = bank_plus.num_prototypes();
    if (split_channel + 1 >= channels) {
        throw std::out_of_range("split channel must precede the duplicate channel");
    }
    const std::size_t dup = channels - 1;
    const auto p = softmax_channels(channel_logits(feature, bank_plus));

    // dloss/dp for the two free channels; all other channels enter only via the softmax.
    double dloss_dpe = 0.0;
    double dloss_dpn = 0.0;
    const double pe = p[split_channel];
    const double pn = p[dup];
    switch (membership) {
    case Membership::concept_a:
        dloss_dpe = -1.0 / (pe + hyper.epsilon);
        break;
    case Membership::concept_b:
        dloss_dpn = -1.0 / (pn + hyper.epsilon);
        break;
    case Membership::reference:
        if (-std::log(1.0 - pe + hyper.epsilon) - hyper.kappa > 0.0) {
            dloss_dpe = hyper.alpha / (1.0 - pe + hyper.epsilon);
        }
        if (-std::log(1.0 - pn + hyper.epsilon) - hyper.kappa > 0.0) {
            dloss_dpn = hyper.alpha / (1.0 - pn + hyper.epsilon);
        }
        break;
    }

    // Softmax Jacobian: dp_c/dz_j = p_c (delta_cj - p_j).
    const double dloss_dze = dloss_dpe * pe * (1.0 - pe) + dloss_dpn * (-pn * pe);
    const double dloss_dzn = dloss_dpe * (-pe * pn) + dloss_dpn * pn * (1.0 - pn);

    KernelGradients g;
    g.loss = split_loss(membership, p, split_channel, hyper);
    g.original.resize(feature.size());
    g.duplicate.resize(feature.size());
    for (std::size_t i = 0; i < feature.size(); ++i) {
        g.original[i] = dloss_dze * feature[i];
        g.duplicate[i] = dloss_dzn * feature[i];
    }
    return g;
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state,
               const AdamConfig& config) {
    if (params.size() != grads.size()) {
        throw ShapeError("adam gradient", params.size(), grads.size());
    }
    if (state.first_moment.empty() && state.second_moment.empty()) {
        state.first_moment.assign(params.size(), 0.0);
        state.second_moment.assign(params.size(), 0.0);
    }
    if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
        throw ShapeError("adam state", params.size(), state.first_moment.size());
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double bias1 = 1.0 - std::pow(config.beta1, t);
    const double bias2 = 1.0 - std::pow(config.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& v = state.second_moment[i];
        m = config.beta1 * m + (1.0 - config.beta1) * grads[i];
        v = config.beta2 * v + (1.0 - config.beta2) * grads[i] * grads[i];
        const double m_hat = m / bias1;
        const double v_hat = v / bias2;
        params[i] -= config.learning_rate * config.weight_decay * params[i];
        params[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
}

double ConceptAccuracy::minimum() const {
    return std::min({s1, s2, sr});
}

ConceptAccuracy per_concept_accuracy(const ConceptSets& sets, const PrototypeBank& bank_plus,
                                     std::size_t split_channel, double kappa) {
    const std::size_t dup = bank_plus.num_prototypes() - 1;
    if (split_channel >= dup) {
        throw std::out_of_range("split channel must precede the duplicate channel");
    }
    const double bound = 1.0 - std::exp(-kappa);
    auto fraction = [&](const std::vector<PatchRecord>& patches, auto&& correct, bool& vacuous) {
        if (patches.empty()) {
            vacuous = true;
            return 1.0;
        }
        std::size_t hits = 0;
        for (const auto& patch : patches) {
            if (correct(patch_activations(patch, bank_plus))) {
                ++hits;
            }
        }
        return static_cast<double>(hits) / static_cast<double>(patches.size());
    };
    ConceptAccuracy acc;
    acc.s1 = fraction(
        sets.s1,
        [&](const ActivationVector& p) { return argmax(p) == split_channel && p[dup] <= bound; },
        acc.s1_vacuous);
    acc.s2 = fraction(
        sets.s2,
        [&](const ActivationVector& p) { return argmax(p) == dup && p[split_channel] <= bound; },
        acc.s2_vacuous);
    acc.sr = fraction(
        sets.sr,
        [&](const ActivationVector& p) { return p[split_channel] <= bound && p[dup] <= bound; },
        acc.sr_vacuous);
    return acc;
}

ReferenceSet build_reference_set(const Corpus& corpus, const PrototypeBank& bank,
                                 std::size_t split_channel, std::size_t size,
                                 std::span<const PatchRecord> exclude) {
    if (size == 0) {
        throw std::invalid_argument("reference set size must be at least 1");
    }
    check_channel(bank, split_channel);
    const auto excluded = keys_of(exclude);
    const Matrix activations = corpus_activations(corpus, bank);

    std::vector<std::vector<std::size_t>> per_prototype(bank.num_prototypes());
    for (std::size_t i = 0; i < corpus.patches.size(); ++i) {
        if (excluded.contains(key_of(corpus.patches[i]))) {
            continue;
        }
        const std::size_t top = argmax(activations.row(i));
        if (top == split_channel) {
            continue;
        }
        const auto weights = bank.head.row(top);
        if (std::all_of(weights.begin(), weights.end(), [](double w) { return w == 0.0; })) {
            continue;
        }
        per_prototype[top].push_back(i);
    }
    for (std::size_t d = 0; d < per_prototype.size(); ++d) {
        std::stable_sort(per_prototype[d].begin(), per_prototype[d].end(),
                         [&](std::size_t a, std::size_t b) {
                             return activations(a, d) > activations(b, d);
                         });
    }

    ReferenceSet out;
    for (std::size_t depth = 0; out.patches.size() < size; ++depth) {
        bool any = false;
        for (std::size_t d = 0; d < per_prototype.size() && out.patches.size() < size; ++d) {
            if (depth < per_prototype[d].size()) {
                out.patches.push_back(corpus.patches[per_prototype[d][depth]]);
                any = true;
            }
        }
        if (!any) {
            break;
        }
    }
    out.short_of_request = out.patches.size() < size;
    return out;
}

std::size_t default_reference_size(std::size_t concept_a_size, std::size_t concept_b_size) {
    return std::max<std::size_t>(20, concept_a_size + concept_b_size);
}

std::string to_string(SessionStatus status) {
    switch (status) {
    case SessionStatus::pending:
        return "pending";
    case SessionStatus::running:
        return "running";
    case SessionStatus::converged:
        return "converged";
    case SessionStatus::budget_exhausted:
        return "budget_exhausted";
    case SessionStatus::failed:
        return "failed";
    }
    return "unknown";
}

SplitSession::SplitSession(const PrototypeBank& bank, std::size_t prototype, ConceptSets sets,
                           SplitHyperparams hyper, std::size_t min_concept_size)
    : prototype_(prototype), sets_(std::move(sets)), hyper_(hyper) {
    hyper_.validate();
    check_channel(bank, prototype);
    sets_.validate(min_concept_size);
    const std::size_t width = bank.feature_width();
    for (const auto* group : {&sets_.s1, &sets_.s2, &sets_.sr}) {
        for (const auto& patch : *group) {
            if (patch.feature.size() != width) {
                throw ShapeError("feature of patch " + patch.id, width, patch.feature.size());
            }
        }
    }
    bank_plus_ = duplicate_kernel(bank, prototype);
}

void SplitSession::advance(SessionStatus next) {
    if (static_cast<int>(next) <= static_cast<int>(status_)) {
        throw SplitError("split session cannot move from " + to_string(status_) + " to " +
                         to_string(next));
    }
    status_ = next;
}

double SplitSession::evaluate_loss() const {
    double total = 0.0;
    std::size_t count = 0;
    auto add = [&](const std::vector<PatchRecord>& patches, Membership m) {
        for (const auto& patch : patches) {
            total += split_loss(m, patch_activations(patch, bank_plus_), prototype_, hyper_);
            ++count;
        }
    };
    add(sets_.s1, Membership::concept_a);
    add(sets_.s2, Membership::concept_b);
    add(sets_.sr, Membership::reference);
    return count == 0 ? 0.0 : total / static_cast<double>(count);
}

SplitResult SplitSession::run(std::uint64_t seed, const ProgressCallback& progress) {
    advance(SessionStatus::running);

    struct Item {
        const PatchRecord* patch;
        Membership membership;
    };
    std::vector<Item> items;
    std::vector<std::vector<std::size_t>> strata(3);
    for (const auto& p : sets_.s1) {
        strata[0].push_back(items.size());
        items.push_back({&p, Membership::concept_a});
    }
    for (const auto& p : sets_.s2) {
        strata[1].push_back(items.size());
        items.push_back({&p, Membership::concept_b});
    }
    for (const auto& p : sets_.sr) {
        strata[2].push_back(items.size());
        items.push_back({&p, Membership::reference});
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t dup = bank_plus_.num_prototypes() - 1;
    const std::size_t width = bank_plus_.feature_width();

    if (hyper_.duplicate_jitter > 0.0) {
        std::uniform_real_distribution<double> jitter(-hyper_.duplicate_jitter,
                                                      hyper_.duplicate_jitter);
        for (double& v : bank_plus_.kernels.row(dup)) {
            v += jitter(rng);
        }
    }

    const AdamConfig adam{hyper_.learning_rate, 0.9, 0.999, 1e-8, hyper_.weight_decay};
    const std::size_t batch = std::min(hyper_.batch_size, items.size());
    std::vector<std::size_t> pool(items.size());
    std::vector<double> noisy(width);
    std::vector<double> grad_original(width);
    std::vector<double> grad_duplicate(width);
    std::size_t calm_evaluations = 0;
    SplitResult result;
    result.prototype = prototype_;
    result.new_channel = dup;

    auto finish = [&](SessionStatus status, std::size_t steps) {
        advance(status);
        result.converged = status == SessionStatus::converged;
        result.steps = steps;
        result.bank = bank_plus_;
        result.kernel_original.assign(bank_plus_.kernels.row(prototype_).begin(),
                                      bank_plus_.kernels.row(prototype_).end());
        result.kernel_duplicate.assign(bank_plus_.kernels.row(dup).begin(),
                                       bank_plus_.kernels.row(dup).end());
        result.accuracy = per_concept_accuracy(sets_, bank_plus_, prototype_, hyper_.kappa);
        return result;
    };

    for (std::size_t step = 1; step <= hyper_.max_steps; ++step) {
        std::vector<std::size_t> chosen;
        if (hyper_.stratified_batches) {
            for (std::size_t b = 0; b < batch; ++b) {
                std::size_t s = (step * batch + b) % 3;
                while (strata[s].empty()) {
                    s = (s + 1) % 3;
                }
                std::uniform_int_distribution<std::size_t> pick(0, strata[s].size() - 1);
                chosen.push_back(strata[s][pick(rng)]);
            }
        } else {
            std::iota(pool.begin(), pool.end(), std::size_t{0});
            for (std::size_t b = 0; b < batch; ++b) {
                std::uniform_int_distribution<std::size_t> pick(b, pool.size() - 1);
                std::swap(pool[b], pool[pick(rng)]);
                chosen.push_back(pool[b]);
            }
        }

        std::fill(grad_original.begin(), grad_original.end(), 0.0);
        std::fill(grad_duplicate.begin(), grad_duplicate.end(), 0.0);
        double batch_loss = 0.0;
        for (std::size_t idx : chosen) {
            const auto& feature = items[idx].patch->feature;
            for (std::size_t i = 0; i < width; ++i) {
                noisy[i] = feature[i] + hyper_.noise_sigma * gauss(rng);
            }
            const auto g = split_loss_gradient(noisy, bank_plus_, prototype_, items[idx].membership,
                                               hyper_);
            batch_loss += g.loss;
            for (std::size_t i = 0; i < width; ++i) {
                grad_original[i] += g.original[i];
                grad_duplicate[i] += g.duplicate[i];
            }
        }
        const double scale = 1.0 / static_cast<double>(chosen.size());
        batch_loss *= scale;
        if (!std::isfinite(batch_loss)) {
            advance(SessionStatus::failed);
            std::ostringstream msg;
            msg << "non-finite split loss at step " << step << " for prototype " << prototype_;
            throw SplitError(msg.str());
        }
        for (std::size_t i = 0; i < width; ++i) {
            grad_original[i] *= scale;
            grad_duplicate[i] *= scale;
        }
        adam_step(bank_plus_.kernels.row(prototype_), grad_original, original_state_, adam);
        adam_step(bank_plus_.kernels.row(dup), grad_duplicate, duplicate_state_, adam);
        loss_history_.push_back(batch_loss);

        if (step % hyper_.eval_interval != 0) {
            continue;
        }
        const auto acc = per_concept_accuracy(sets_, bank_plus_, prototype_, hyper_.kappa);
        const double eval_loss = evaluate_loss();
        accuracy_history_.push_back(acc);
        eval_loss_history_.push_back(eval_loss);
        const auto window = std::min(hyper_.eval_interval, loss_history_.size());
        const double smoothed =
            std::accumulate(loss_history_.end() - static_cast<std::ptrdiff_t>(window),
                            loss_history_.end(), 0.0) /
            static_cast<double>(window);
        if (progress) {
            progress({step, smoothed, acc});
        }
        if (acc.minimum() >= hyper_.accuracy_target) {
            return finish(SessionStatus::converged, step);
        }
        calm_evaluations = smoothed < hyper_.loss_target ? calm_evaluations + 1 : 0;
        if (calm_evaluations >= hyper_.patience) {
            return finish(SessionStatus::converged, step);
        }
    }
    return finish(SessionStatus::budget_exhausted, hyper_.max_steps);
}

SplitResult run_split(SplitSession& session, std::uint64_t seed,
                      const SplitSession::ProgressCallback& progress) {
    return session.run(seed, progress);
}

HeadFinetuneResult reinit_and_finetune_head(const PrototypeBank& bank_plus, std::size_t prototype,
                                            std::span<const LabeledActivation> dataset,
                                            const HeadFinetuneConfig& config, std::uint64_t seed) {
    const std::size_t rows = bank_plus.head.rows();
    const std::size_t classes = bank_plus.head.cols();
    if (rows < 2 || prototype + 1 >= rows) {
        throw std::out_of_range("fine-tuned prototype must precede the duplicate head row");
    }
    const std::size_t dup = rows - 1;
    const std::size_t trainable[2] = {prototype, dup};

    HeadFinetuneResult out;
    out.bank = bank_plus;
    Matrix& head = out.bank.head;

    std::vector<double> positives;
    for (std::size_t r = 0; r < rows; ++r) {
        if (r == prototype || r == dup) {
            continue;
        }
        for (double w : head.row(r)) {
            if (w > 0.0) {
                positives.push_back(w);
            }
        }
    }
    if (positives.empty()) {
        out.fallback_init = true;
        out.init_mean = 0.1;
        out.init_stddev = 0.01;
    } else {
        // Centred on the first entry so that identical weights reproduce that weight exactly.
        const double n = static_cast<double>(positives.size());
        const double anchor = positives.front();
        double offset = 0.0;
        for (double w : positives) {
            offset += w - anchor;
        }
        out.init_mean = anchor + offset / n;
        double var = 0.0;
        for (double w : positives) {
            var += (w - out.init_mean) * (w - out.init_mean);
        }
        out.init_stddev = std::sqrt(var / n);
    }

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t r : trainable) {
        for (double& w : head.row(r)) {
            w = std::max(0.0, out.init_mean + out.init_stddev * gauss(rng));
        }
    }

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> grad(2 * classes);
    AdamState state;
    const AdamConfig adam{config.learning_rate, 0.9, 0.999, 1e-8, 0.0};
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t stop = std::min(order.size(), start + config.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            for (std::size_t s = start; s < stop; ++s) {
                const auto& sample = dataset[order[s]];
                if (sample.pooled.size() != rows) {
                    throw ShapeError("pooled activations vs. head rows", rows, sample.pooled.size());
                }
                const auto scores = classify(sample.pooled, out.bank);
                const double total = std::accumulate(scores.begin(), scores.end(), 0.0);
                if (total <= 0.0) {
                    continue;
                }
                const double target = scores.at(sample.label);
                const double share = target / total;
                const double outer = -1.0 / (share + config.epsilon);
                for (std::size_t t = 0; t < 2; ++t) {
                    const double pd = sample.pooled[trainable[t]];
                    for (std::size_t k = 0; k < classes; ++k) {
                        const double dshare =
                            pd * ((k == sample.label ? total : 0.0) - target) / (total * total);
                        grad[t * classes + k] += outer * dshare;
                    }
                }
            }
            const double scale = 1.0 / static_cast<double>(stop - start);
            for (double& g : grad) {
                g *= scale;
            }
            std::vector<double> rows_flat(2 * classes);
            for (std::size_t t = 0; t < 2; ++t) {
                std::copy(head.row(trainable[t]).begin(), head.row(trainable[t]).end(),
                          rows_flat.begin() + static_cast<std::ptrdiff_t>(t * classes));
            }
            adam_step(rows_flat, grad, state, adam);
            for (std::size_t t = 0; t < 2; ++t) {
                auto row = head.row(trainable[t]);
                for (std::size_t k = 0; k < classes; ++k) {
                    row[k] = std::max(0.0, rows_flat[t * classes + k]);
                }
            }
        }
    }
    return out;
}

} // namespace protosplit
