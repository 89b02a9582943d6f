#include "protosplit/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

namespace protosplit {

void SynthConfig::validate() const {
    if (feature_width == 0 || classes == 0 || patches_per_part == 0 || grid_h == 0 || grid_w == 0) {
        throw std::invalid_argument("synthetic config dimensions must be positive");
    }
    if (prototypes < 2) {
        throw std::invalid_argument("synthetic config needs at least two prototypes");
    }
    if (entangled_count > prototypes) {
        throw std::invalid_argument("entangled_count exceeds the number of prototypes");
    }
    if (parts < 2) {
        throw std::invalid_argument("synthetic config needs at least two parts");
    }
    const std::size_t concepts = prototypes + entangled_count;
    if (concepts > parts + parts * (parts - 1) / 2) {
        throw std::invalid_argument("too few parts to give every concept a distinct pattern");
    }
    if (!(cluster_spread >= 0.0) || !(kernel_scale > 0.0) || !(feature_scale > 0.0) || !(max_coherence > 0.0) ||
        max_coherence >= 1.0) {
        throw std::invalid_argument("invalid spread, kernel scale or coherence bound");
    }
    if (entangled_count > 0 && (planted_per_concept == 0 || planted_per_concept > patches_per_part)) {
        throw std::invalid_argument("planted_per_concept must lie in [1, patches_per_part]");
    }
}

namespace {

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

void normalize(std::vector<double>& v) {
    const double n = std::sqrt(dot(v, v));
    for (double& x : v) {
        x /= n;
    }
}

double as_float(double v) {
    return static_cast<double>(static_cast<float>(v));
}

class CentreSampler {
public:
    CentreSampler(std::size_t width, double max_coherence, std::mt19937_64& rng)
        : width_(width), bound_(max_coherence), rng_(rng) {}

    std::vector<double> consistent() {
        for (int attempt = 0; attempt < max_attempts; ++attempt) {
            auto c = draw(nullptr);
            if (fits(c)) {
                centres_.push_back(c);
                return c;
            }
        }
        throw std::runtime_error("could not place a concept centre under the coherence bound");
    }

    std::pair<std::vector<double>, std::vector<double>> entangled_pair() {
        for (int attempt = 0; attempt < max_attempts; ++attempt) {
            auto a = draw(nullptr);
            if (!fits(a)) {
                continue;
            }
            auto b = draw(&a);
            if (!fits(b)) {
                continue;
            }
            std::vector<double> bisector(width_);
            for (std::size_t i = 0; i < width_; ++i) {
                bisector[i] = a[i] + b[i];
            }
            normalize(bisector);
            if (!fits(bisector)) {
                continue;
            }
            centres_.push_back(a);
            centres_.push_back(b);
            bisectors_.push_back(bisector);
            return {a, b};
        }
        throw std::runtime_error("could not place an entangled concept pair under the coherence bound");
    }

private:
    static constexpr int max_attempts = 20000;

    // Gram-Schmidt against `orthogonal_to` when given.
    std::vector<double> draw(const std::vector<double>* orthogonal_to) {
        std::normal_distribution<double> gauss(0.0, 1.0);
        std::vector<double> v(width_);
        for (double& x : v) {
            x = gauss(rng_);
        }
        if (orthogonal_to != nullptr) {
            const double proj = dot(v, *orthogonal_to);
            for (std::size_t i = 0; i < width_; ++i) {
                v[i] -= proj * (*orthogonal_to)[i];
            }
        }
        normalize(v);
        return v;
    }

    bool fits(const std::vector<double>& v) const {
        for (const auto& c : centres_) {
            if (std::abs(dot(v, c)) > bound_) {
                return false;
            }
        }
        for (const auto& b : bisectors_) {
            if (std::abs(dot(v, b)) > bound_) {
                return false;
            }
        }
        return true;
    }

    std::size_t width_;
    double bound_;
    std::mt19937_64& rng_;
    std::vector<std::vector<double>> centres_;
    std::vector<std::vector<double>> bisectors_;
};

std::vector<PartSet> enumerate_patterns(std::size_t parts) {
    auto label = [](std::size_t i) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "part_%02zu", i);
        return std::string(buf);
    };
    std::vector<PartSet> patterns;
    for (std::size_t i = 0; i < parts; ++i) {
        patterns.push_back({label(i)});
    }
    for (std::size_t i = 0; i < parts; ++i) {
        for (std::size_t j = i + 1; j < parts; ++j) {
            patterns.push_back({label(i), label(j)});
        }
    }
    return patterns;
}

std::string numbered(const char* prefix, std::size_t n) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s%05zu", prefix, n);
    return buf;
}

std::string thumbnail_bytes(std::size_t concept_id, double magnitude) {
    std::string out = "P5\n4 4\n255\n";
    for (std::size_t i = 0; i < 16; ++i) {
        const auto shade = static_cast<unsigned>((concept_id * 37 + i * 11) % 200) +
                           static_cast<unsigned>(magnitude * 55.0);
        out.push_back(static_cast<char>(std::min(255U, shade)));
    }
    return out;
}

} // namespace

SyntheticWorkbench generate_bank(const SynthConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const std::size_t width = config.feature_width;

    SyntheticWorkbench wb;
    GroundTruth& truth = wb.truth;
    truth.prototypes.resize(config.prototypes);

    std::vector<std::size_t> order(config.prototypes);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0; i < config.entangled_count; ++i) {
        truth.prototypes[order[i]].entangled = true;
    }

    // Concept centres, one per consistent prototype and two per entangled one.
    CentreSampler sampler(width, config.max_coherence, rng);
    std::vector<std::vector<double>> centres;
    wb.bank.kernels = Matrix(config.prototypes, width);
    for (std::size_t d = 0; d < config.prototypes; ++d) {
        auto& proto = truth.prototypes[d];
        auto kernel = wb.bank.kernels.row(d);
        if (proto.entangled) {
            auto [a, b] = sampler.entangled_pair();
            for (std::size_t i = 0; i < width; ++i) {
                kernel[i] = as_float(config.kernel_scale * (a[i] + b[i]));
            }
            proto.concepts = {centres.size(), centres.size() + 1};
            centres.push_back(std::move(a));
            centres.push_back(std::move(b));
        } else {
            auto c = sampler.consistent();
            for (std::size_t i = 0; i < width; ++i) {
                kernel[i] = as_float(config.kernel_scale * c[i]);
            }
            proto.concepts = {centres.size()};
            centres.push_back(std::move(c));
        }
        truth.concept_owner.insert(truth.concept_owner.end(), proto.concepts.size(), d);
    }

    auto patterns = enumerate_patterns(config.parts);
    std::shuffle(patterns.begin(), patterns.end(), rng);
    truth.concept_patterns.assign(patterns.begin(),
                                  patterns.begin() + static_cast<std::ptrdiff_t>(centres.size()));

    // Sparse non-negative head: a primary class per prototype, sometimes a weak second one.
    wb.bank.head = Matrix(config.prototypes, config.classes);
    std::vector<std::size_t> primary(config.prototypes);
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> strong(0.5, 1.5);
    std::uniform_real_distribution<double> weak(0.1, 0.4);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < config.prototypes; ++i) {
        const std::size_t d = order[i];
        primary[d] = i % config.classes;
        wb.bank.head(d, primary[d]) = as_float(strong(rng));
        if (config.classes > 1 && unit(rng) < 0.25) {
            std::uniform_int_distribution<std::size_t> other(1, config.classes - 1);
            const std::size_t second = (primary[d] + other(rng)) % config.classes;
            wb.bank.head(d, second) = as_float(weak(rng));
        }
    }
    for (std::size_t k = 0; k < config.classes; ++k) {
        wb.bank.class_names.push_back(numbered("class_", k));
    }

    // Patch directions and magnitudes around each concept centre.
    struct Draft {
        std::size_t concept_id;
        std::vector<double> direction;
        double magnitude;
        std::size_t image = 0;
        std::size_t cell = 0;
    };
    std::vector<Draft> drafts;
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> magnitude(0.6, 0.85);
    const double jitter = config.cluster_spread / std::sqrt(static_cast<double>(width));
    for (std::size_t c = 0; c < centres.size(); ++c) {
        for (std::size_t n = 0; n < config.patches_per_part; ++n) {
            std::vector<double> dir = centres[c];
            for (double& x : dir) {
                x += jitter * gauss(rng);
            }
            normalize(dir);
            drafts.push_back({c, std::move(dir), magnitude(rng)});
        }
    }

    // Lay each class's patches out over images of grid_h x grid_w cells.
    const std::size_t cells = static_cast<std::size_t>(config.grid_h) * config.grid_w;
    std::vector<std::size_t> image_label;
    for (std::size_t k = 0; k < config.classes; ++k) {
        std::vector<std::size_t> pool;
        for (std::size_t i = 0; i < drafts.size(); ++i) {
            if (primary[truth.concept_owner[drafts[i].concept_id]] == k) {
                pool.push_back(i);
            }
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t start = 0; start < pool.size(); start += cells) {
            const std::size_t image = image_label.size();
            image_label.push_back(k);
            for (std::size_t j = start; j < std::min(pool.size(), start + cells); ++j) {
                drafts[pool[j]].image = image;
                drafts[pool[j]].cell = j - start;
            }
        }
    }

    // Planted patches: full magnitude, one per image, so that they lead the prototype's ranking.
    for (std::size_t d = 0; d < config.prototypes; ++d) {
        auto& proto = truth.prototypes[d];
        if (!proto.entangled) {
            continue;
        }
        std::set<std::size_t> used_images;
        for (std::size_t side = 0; side < 2; ++side) {
            std::vector<std::size_t> candidates;
            for (std::size_t i = 0; i < drafts.size(); ++i) {
                if (drafts[i].concept_id == proto.concepts[side]) {
                    candidates.push_back(i);
                }
            }
            std::shuffle(candidates.begin(), candidates.end(), rng);
            std::size_t planted = 0;
            for (std::size_t i : candidates) {
                if (planted == config.planted_per_concept) {
                    break;
                }
                if (!used_images.insert(drafts[i].image).second) {
                    continue;
                }
                drafts[i].magnitude = 1.0;
                ++planted;
            }
            if (planted < config.planted_per_concept) {
                throw std::runtime_error("not enough distinct images to plant entangled patches");
            }
        }
    }

    // Corpus order: images by index, patches by cell.
    Corpus& corpus = wb.corpus;
    corpus.grid_h = config.grid_h;
    corpus.grid_w = config.grid_w;
    for (std::size_t i = 0; i < image_label.size(); ++i) {
        corpus.images.push_back({numbered("img", i), image_label[i]});
    }
    std::vector<std::size_t> layout(drafts.size());
    std::iota(layout.begin(), layout.end(), std::size_t{0});
    std::sort(layout.begin(), layout.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(drafts[a].image, drafts[a].cell) < std::tie(drafts[b].image, drafts[b].cell);
    });
    for (std::size_t i : layout) {
        const auto& draft = drafts[i];
        PatchRecord patch;
        patch.id = numbered("p", corpus.patches.size());
        patch.image_id = corpus.images[draft.image].id;
        patch.location = {static_cast<std::uint32_t>(draft.cell / config.grid_w),
                          static_cast<std::uint32_t>(draft.cell % config.grid_w)};
        patch.thumbnail_ref = "thumbnails/" + patch.id + ".pgm";
        patch.feature.resize(width);
        for (std::size_t j = 0; j < width; ++j) {
            patch.feature[j] = as_float(config.feature_scale * draft.magnitude * draft.direction[j]);
        }
        wb.thumbnails.emplace(patch.thumbnail_ref, thumbnail_bytes(draft.concept_id, draft.magnitude));
        truth.patch_concept.emplace(patch.id, draft.concept_id);
        auto& proto = truth.prototypes[truth.concept_owner[draft.concept_id]];
        if (proto.entangled && draft.magnitude == 1.0) {
            (draft.concept_id == proto.concepts[0] ? proto.planted_a : proto.planted_b)
                .push_back(patch.id);
        }
        corpus.patches.push_back(std::move(patch));
    }

    wb.bank.validate();
    corpus.validate(width);
    return wb;
}

ConceptSets oracle_labels(const SyntheticWorkbench& workbench, std::size_t prototype,
                          std::size_t reference_size) {
    if (prototype >= workbench.truth.prototypes.size() ||
        !workbench.truth.prototypes[prototype].entangled) {
        throw std::invalid_argument("prototype " + std::to_string(prototype) +
                                    " is not an entangled prototype");
    }
    const auto& proto = workbench.truth.prototypes[prototype];
    ConceptSets sets;
    auto gather = [&](const std::vector<std::string>& ids, std::vector<PatchRecord>& out) {
        for (const auto& id : ids) {
            const auto idx = workbench.corpus.find_patch(id);
            if (!idx) {
                throw std::invalid_argument("planted patch " + id + " missing from corpus");
            }
            out.push_back(workbench.corpus.patches[*idx]);
        }
    };
    gather(proto.planted_a, sets.s1);
    gather(proto.planted_b, sets.s2);
    std::vector<PatchRecord> labelled = sets.s1;
    labelled.insert(labelled.end(), sets.s2.begin(), sets.s2.end());
    const std::size_t size =
        reference_size != 0 ? reference_size : default_reference_size(sets.s1.size(), sets.s2.size());
    sets.sr = build_reference_set(workbench.corpus, workbench.bank, prototype, size, labelled).patches;
    return sets;
}

} // namespace protosplit
