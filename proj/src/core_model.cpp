#include "protosplit/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

namespace protosplit {

ShapeError::ShapeError(const std::string& what, std::size_t expected, std::size_t actual)
    : std::invalid_argument(what + ": expected length " + std::to_string(expected) + ", got " +
                            std::to_string(actual)) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), data_(std::move(values)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix storage", rows * cols, data_.size());
    }
}

std::span<double> Matrix::row(std::size_t r) {
    return {data_.data() + r * cols_, cols_};
}

std::span<const double> Matrix::row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) {
        cols_ = values.size();
    }
    if (values.size() != cols_) {
        throw ShapeError("appended row", cols_, values.size());
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

std::vector<std::vector<std::size_t>> Corpus::patches_by_image() const {
    std::unordered_map<std::string, std::size_t> slot;
    slot.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) {
        slot.emplace(images[i].id, i);
    }
    std::vector<std::vector<std::size_t>> grouped(images.size());
    for (std::size_t p = 0; p < patches.size(); ++p) {
        auto it = slot.find(patches[p].image_id);
        if (it == slot.end()) {
            throw std::invalid_argument("patch " + patches[p].id + " references unknown image " +
                                        patches[p].image_id);
        }
        grouped[it->second].push_back(p);
    }
    return grouped;
}

std::optional<std::size_t> Corpus::find_patch(const std::string& patch_id) const {
    for (std::size_t i = 0; i < patches.size(); ++i) {
        if (patches[i].id == patch_id) {
            return i;
        }
    }
    return std::nullopt;
}

void Corpus::validate(std::size_t feature_width) const {
    if (grid_h == 0 || grid_w == 0) {
        throw std::invalid_argument("patch grid must be non-empty");
    }
    std::unordered_set<std::string> image_ids;
    for (const auto& image : images) {
        if (!image_ids.insert(image.id).second) {
            throw std::invalid_argument("duplicate image id " + image.id);
        }
    }
    std::unordered_set<std::string> patch_ids;
    for (const auto& patch : patches) {
        if (!patch_ids.insert(patch.id).second) {
            throw std::invalid_argument("duplicate patch id " + patch.id);
        }
        if (patch.feature.size() != feature_width) {
            throw ShapeError("feature of patch " + patch.id, feature_width, patch.feature.size());
        }
        for (double v : patch.feature) {
            if (!std::isfinite(v)) {
                throw std::invalid_argument("non-finite feature in patch " + patch.id);
            }
        }
        if (patch.location.h >= grid_h || patch.location.w >= grid_w) {
            throw std::invalid_argument("patch " + patch.id + " lies outside the " +
                                        std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                        " grid");
        }
        if (!image_ids.contains(patch.image_id)) {
            throw std::invalid_argument("patch " + patch.id + " references unknown image " +
                                        patch.image_id);
        }
        if (patch.activation_cache) {
            const double total = std::accumulate(patch.activation_cache->begin(),
                                                 patch.activation_cache->end(), 0.0);
            if (std::abs(total - 1.0) > 1e-6) {
                throw std::invalid_argument("cached activations of patch " + patch.id +
                                            " do not sum to 1");
            }
        }
    }
}

void PrototypeBank::validate() const {
    if (kernels.rows() < 2) {
        throw std::invalid_argument("a prototype bank needs at least two prototypes");
    }
    if (head.rows() != kernels.rows()) {
        throw ShapeError("head rows", kernels.rows(), head.rows());
    }
    if (!class_names.empty() && class_names.size() != head.cols()) {
        throw ShapeError("class names", head.cols(), class_names.size());
    }
    for (double v : kernels.values()) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("non-finite prototype kernel entry");
        }
    }
    for (double v : head.values()) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw std::invalid_argument("class head entries must be finite and non-negative");
        }
    }
}

std::vector<double> channel_logits(std::span<const double> feature, const PrototypeBank& bank) {
    if (feature.size() != bank.feature_width()) {
        throw ShapeError("patch feature vs. kernel width", bank.feature_width(), feature.size());
    }
    std::vector<double> logits(bank.num_prototypes());
    for (std::size_t d = 0; d < logits.size(); ++d) {
        const auto kernel = bank.kernels.row(d);
        logits[d] = std::inner_product(feature.begin(), feature.end(), kernel.begin(), 0.0);
    }
    return logits;
}

std::vector<double> channel_logits(const PatchRecord& patch, const PrototypeBank& bank) {
    return channel_logits(std::span<const double>(patch.feature), bank);
}

ActivationVector softmax_channels(std::span<const double> logits) {
    if (logits.empty()) {
        throw std::invalid_argument("softmax over zero channels");
    }
    double peak = logits[0];
    for (double v : logits) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("softmax input contains NaN or infinity");
        }
        peak = std::max(peak, v);
    }
    ActivationVector out(logits.size());
    double total = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - peak);
        total += out[i];
    }
    for (double& v : out) {
        v /= total;
    }
    return out;
}

ActivationVector pool_activations(std::span<const ActivationVector> per_location) {
    if (per_location.empty()) {
        throw std::invalid_argument("cannot pool an empty set of locations");
    }
    ActivationVector pooled = per_location.front();
    for (const auto& v : per_location.subspan(1)) {
        if (v.size() != pooled.size()) {
            throw ShapeError("pooled activation vector", pooled.size(), v.size());
        }
        for (std::size_t d = 0; d < v.size(); ++d) {
            pooled[d] = std::max(pooled[d], v[d]);
        }
    }
    return pooled;
}

std::vector<double> classify(std::span<const double> activations, const PrototypeBank& bank) {
    if (activations.size() != bank.head.rows()) {
        throw ShapeError("activations vs. head rows", bank.head.rows(), activations.size());
    }
    std::vector<double> scores(bank.num_classes(), 0.0);
    for (std::size_t d = 0; d < activations.size(); ++d) {
        if (activations[d] == 0.0) {
            continue;
        }
        const auto weights = bank.head.row(d);
        for (std::size_t k = 0; k < scores.size(); ++k) {
            scores[k] += activations[d] * weights[k];
        }
    }
    return scores;
}

ActivationVector patch_activations(const PatchRecord& patch, const PrototypeBank& bank) {
    return softmax_channels(channel_logits(patch, bank));
}

Matrix corpus_activations(const Corpus& corpus, const PrototypeBank& bank) {
    Matrix out(corpus.patches.size(), bank.num_prototypes());
    for (std::size_t i = 0; i < corpus.patches.size(); ++i) {
        const auto p = patch_activations(corpus.patches[i], bank);
        std::copy(p.begin(), p.end(), out.row(i).begin());
    }
    return out;
}

Matrix pooled_image_activations(const Corpus& corpus, const Matrix& per_patch) {
    if (per_patch.rows() != corpus.patches.size()) {
        throw ShapeError("per-patch activation rows", corpus.patches.size(), per_patch.rows());
    }
    const auto grouped = corpus.patches_by_image();
    Matrix pooled(corpus.images.size(), per_patch.cols());
    for (std::size_t img = 0; img < grouped.size(); ++img) {
        auto out = pooled.row(img);
        for (std::size_t p : grouped[img]) {
            const auto act = per_patch.row(p);
            for (std::size_t d = 0; d < act.size(); ++d) {
                out[d] = std::max(out[d], act[d]);
            }
        }
    }
    return pooled;
}

std::vector<LabeledActivation> labeled_pooled_activations(const Corpus& corpus,
                                                          const PrototypeBank& bank) {
    const Matrix pooled = pooled_image_activations(corpus, corpus_activations(corpus, bank));
    std::vector<LabeledActivation> out;
    out.reserve(corpus.images.size());
    for (std::size_t i = 0; i < corpus.images.size(); ++i) {
        out.push_back({ActivationVector(pooled.row(i).begin(), pooled.row(i).end()),
                       corpus.images[i].label});
    }
    return out;
}

std::size_t argmax(std::span<const double> values) {
    if (values.empty()) {
        throw std::invalid_argument("argmax of an empty vector");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) {
            best = i;
        }
    }
    return best;
}

} // namespace protosplit
