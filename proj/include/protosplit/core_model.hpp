#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace protosplit {

/// Raised whenever two operands disagree on a dimension.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& what, std::size_t expected, std::size_t actual);
};

/// Dense row-major matrix of doubles. Rows are exposed as spans.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r);
    std::span<const double> row(std::size_t r) const;

    /// Appends a row; its length must equal cols() (or defines cols() on an empty matrix).
    void append_row(std::span<const double> values);

    const std::vector<double>& values() const { return data_; }
    std::vector<double>& values() { return data_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

struct GridLocation {
    std::uint32_t h = 0;
    std::uint32_t w = 0;
    bool operator==(const GridLocation&) const = default;
};

/// One spatial cell of the backbone feature map.
struct PatchRecord {
    std::string id;
    std::vector<double> feature;
    std::string image_id;
    GridLocation location;
    std::string thumbnail_ref;
    std::optional<std::vector<double>> activation_cache;

    bool operator==(const PatchRecord&) const = default;
};

struct ImageRecord {
    std::string id;
    std::size_t label = 0;
    bool operator==(const ImageRecord&) const = default;
};

/// All patches of an exported dataset together with their source images.
struct Corpus {
    std::uint32_t grid_h = 1;
    std::uint32_t grid_w = 1;
    std::vector<ImageRecord> images;
    std::vector<PatchRecord> patches;

    /// Patch indices grouped per image, in image order.
    std::vector<std::vector<std::size_t>> patches_by_image() const;
    std::optional<std::size_t> find_patch(const std::string& patch_id) const;

    /// Checks feature widths, finiteness, grid bounds, image references and cached activations.
    void validate(std::size_t feature_width) const;

    bool operator==(const Corpus&) const = default;
};

/// Prototype kernels (D x C) and the non-negative class head (D x K).
struct PrototypeBank {
    Matrix kernels;
    Matrix head;
    std::vector<std::string> class_names;

    std::size_t num_prototypes() const { return kernels.rows(); }
    std::size_t feature_width() const { return kernels.cols(); }
    std::size_t num_classes() const { return head.cols(); }

    /// Throws std::invalid_argument / ShapeError when an invariant is broken.
    void validate() const;

    bool operator==(const PrototypeBank&) const = default;
};

using ActivationVector = std::vector<double>;

std::vector<double> channel_logits(std::span<const double> feature, const PrototypeBank& bank);
std::vector<double> channel_logits(const PatchRecord& patch, const PrototypeBank& bank);

/// Numerically stable softmax (max-subtracted). Rejects non-finite input.
ActivationVector softmax_channels(std::span<const double> logits);

/// Coordinatewise max over spatial locations.
ActivationVector pool_activations(std::span<const ActivationVector> per_location);

/// Class scores o = p * head.
std::vector<double> classify(std::span<const double> activations, const PrototypeBank& bank);

/// softmax_channels(channel_logits(...)). activation_cache is never consulted here.
ActivationVector patch_activations(const PatchRecord& patch, const PrototypeBank& bank);

/// Per-location activations for the whole corpus, one row per patch.
Matrix corpus_activations(const Corpus& corpus, const PrototypeBank& bank);

/// Max-pooled activations per image (rows follow corpus.images).
Matrix pooled_image_activations(const Corpus& corpus, const Matrix& per_patch);

struct LabeledActivation {
    ActivationVector pooled;
    std::size_t label = 0;
};

/// Pooled activations of every corpus image, labelled with the image class.
std::vector<LabeledActivation> labeled_pooled_activations(const Corpus& corpus,
                                                          const PrototypeBank& bank);

/// Index of the largest entry; ties resolve to the smaller index.
std::size_t argmax(std::span<const double> values);

} // namespace protosplit
