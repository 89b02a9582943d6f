#include "protosplit/bundle_io.hpp"

#include "protosplit/synthetic.hpp"

#include <json.hpp>
#include <zlib.h>

#include <atomic>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace protosplit {

namespace fs = std::filesystem;
using nlohmann::json;

BundleError::BundleError(std::string block, const std::string& what)
    : std::runtime_error(block + ": " + what), block_(std::move(block)) {}

namespace {

constexpr char block_magic[4] = {'P', 'P', 'B', '1'};
constexpr std::size_t block_header_size = 4 + 2 + 4 + 4;
constexpr const char* manifest_name = "manifest.json";

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) {
        out.push_back(static_cast<char>((v >> shift) & 0xFF));
    }
}

std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | static_cast<unsigned char>(in[at + static_cast<std::size_t>(i)]);
    }
    return v;
}

std::uint16_t get_u16(std::string_view in, std::size_t at) {
    return static_cast<std::uint16_t>(static_cast<unsigned char>(in[at]) |
                                      (static_cast<unsigned char>(in[at + 1]) << 8));
}

void write_file(const fs::path& path, std::string_view bytes) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
        throw BundleError(path.filename().string(), "write failed");
    }
}

bool safe_relative(const std::string& ref) {
    const fs::path p(ref);
    if (ref.empty() || p.is_absolute()) {
        return false;
    }
    for (const auto& part : p) {
        if (part == "..") {
            return false;
        }
    }
    return true;
}

json matrix_entry(const std::string& file, const Matrix& m, std::uint32_t crc) {
    return {{"file", file}, {"rows", m.rows()}, {"cols", m.cols()}, {"crc32", crc}};
}

json ground_truth_json(const GroundTruth& truth) {
    json protos = json::array();
    for (const auto& p : truth.prototypes) {
        protos.push_back({{"entangled", p.entangled},
                          {"concepts", p.concepts},
                          {"planted_a", p.planted_a},
                          {"planted_b", p.planted_b}});
    }
    json patterns = json::array();
    for (const auto& pattern : truth.concept_patterns) {
        patterns.push_back(pattern);
    }
    return {{"prototypes", protos},
            {"concept_patterns", patterns},
            {"concept_owner", truth.concept_owner},
            {"patch_concept", truth.patch_concept}};
}

GroundTruth ground_truth_from_json(const json& j) {
    GroundTruth truth;
    for (const auto& p : j.at("prototypes")) {
        GroundTruth::Prototype proto;
        proto.entangled = p.at("entangled").get<bool>();
        proto.concepts = p.at("concepts").get<std::vector<std::size_t>>();
        proto.planted_a = p.at("planted_a").get<std::vector<std::string>>();
        proto.planted_b = p.at("planted_b").get<std::vector<std::string>>();
        truth.prototypes.push_back(std::move(proto));
    }
    for (const auto& pattern : j.at("concept_patterns")) {
        truth.concept_patterns.push_back(pattern.get<PartSet>());
    }
    truth.concept_owner = j.at("concept_owner").get<std::vector<std::size_t>>();
    truth.patch_concept = j.at("patch_concept").get<std::map<std::string, std::size_t>>();
    return truth;
}

std::string serialize(const json& j) {
    return j.dump(1) + "\n";
}

std::atomic<unsigned> temp_counter{0};

} // namespace

PatchBundle bundle_from_workbench(const SyntheticWorkbench& workbench) {
    PatchBundle bundle;
    bundle.bank = workbench.bank;
    bundle.corpus = workbench.corpus;
    bundle.thumbnails = workbench.thumbnails;
    bundle.annotations = workbench.truth.annotations();
    bundle.ground_truth = workbench.truth;
    return bundle;
}

std::string encode_block(const Matrix& matrix) {
    std::string out;
    out.reserve(block_header_size + matrix.values().size() * 4);
    out.append(block_magic, 4);
    put_u16(out, bundle_schema_major);
    put_u32(out, static_cast<std::uint32_t>(matrix.rows()));
    put_u32(out, static_cast<std::uint32_t>(matrix.cols()));
    for (double v : matrix.values()) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    return out;
}

Matrix decode_block(std::string_view bytes, const std::string& block_name) {
    if (bytes.size() < block_header_size || std::memcmp(bytes.data(), block_magic, 4) != 0) {
        throw BundleError(block_name, "missing PPB1 block header");
    }
    const std::uint16_t version = get_u16(bytes, 4);
    if (version != bundle_schema_major) {
        throw BundleError(block_name, "unsupported block schema version " + std::to_string(version));
    }
    const std::size_t rows = get_u32(bytes, 6);
    const std::size_t cols = get_u32(bytes, 10);
    if (bytes.size() != block_header_size + rows * cols * 4) {
        throw BundleError(block_name, "payload length does not match " + std::to_string(rows) +
                                          "x" + std::to_string(cols));
    }
    std::vector<double> values(rows * cols);
    for (std::size_t i = 0; i < values.size(); ++i) {
        values[i] = std::bit_cast<float>(get_u32(bytes, block_header_size + 4 * i));
    }
    return Matrix(rows, cols, std::move(values));
}

std::uint32_t crc32_of(std::string_view bytes) {
    uLong crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    return static_cast<std::uint32_t>(crc);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw BundleError(path.filename().string(), "cannot open " + path.string());
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_bundle(const PatchBundle& bundle, const fs::path& path) {
    bundle.bank.validate();
    bundle.corpus.validate(bundle.bank.feature_width());
    if (!bundle.bank.class_names.empty() && bundle.bank.class_names.size() != bundle.bank.num_classes()) {
        throw BundleError("manifest", "class name count does not match the head");
    }
    for (const auto& image : bundle.corpus.images) {
        if (image.label >= bundle.bank.num_classes()) {
            throw BundleError("metadata", "image " + image.id + " has an out-of-range class");
        }
    }

    const fs::path target = fs::absolute(path);
    const fs::path parent = target.parent_path();
    fs::create_directories(parent);
    const std::string stem = target.filename().string();
    const fs::path temp = parent / (stem + ".tmp-" + std::to_string(::getpid()) + "-" +
                                    std::to_string(temp_counter.fetch_add(1)));
    const fs::path retired = parent / (stem + ".old-" + std::to_string(::getpid()) + "-" +
                                       std::to_string(temp_counter.fetch_add(1)));
    try {
        fs::create_directories(temp);

        Matrix features(bundle.corpus.patches.size(), bundle.bank.feature_width());
        bool all_cached = !bundle.corpus.patches.empty();
        for (std::size_t i = 0; i < bundle.corpus.patches.size(); ++i) {
            const auto& patch = bundle.corpus.patches[i];
            std::copy(patch.feature.begin(), patch.feature.end(), features.row(i).begin());
            all_cached = all_cached && patch.activation_cache &&
                         patch.activation_cache->size() == bundle.bank.num_prototypes();
        }

        json blocks = json::object();
        auto emit = [&](const std::string& name, const Matrix& m) {
            const std::string bytes = encode_block(m);
            write_file(temp / (name + ".bin"), bytes);
            blocks[name] = matrix_entry(name + ".bin", m, crc32_of(bytes));
        };
        emit("features", features);
        emit("kernels", bundle.bank.kernels);
        emit("head", bundle.bank.head);
        if (all_cached) {
            Matrix cache(bundle.corpus.patches.size(), bundle.bank.num_prototypes());
            for (std::size_t i = 0; i < bundle.corpus.patches.size(); ++i) {
                const auto& c = *bundle.corpus.patches[i].activation_cache;
                std::copy(c.begin(), c.end(), cache.row(i).begin());
            }
            emit("activations", cache);
        }

        json images = json::array();
        for (const auto& image : bundle.corpus.images) {
            images.push_back({{"id", image.id}, {"label", image.label}});
        }
        json patches = json::array();
        for (const auto& patch : bundle.corpus.patches) {
            patches.push_back({{"id", patch.id},
                               {"image_id", patch.image_id},
                               {"h", patch.location.h},
                               {"w", patch.location.w},
                               {"thumbnail", patch.thumbnail_ref}});
        }
        json documents = json::object();
        auto emit_doc = [&](const std::string& name, const json& doc) {
            const std::string text = serialize(doc);
            write_file(temp / (name + ".json"), text);
            documents[name] = {{"file", name + ".json"}, {"crc32", crc32_of(text)}};
        };
        emit_doc("metadata", {{"images", images}, {"patches", patches}});
        if (bundle.annotations) {
            json ann = json::object();
            for (const auto& [id, parts] : *bundle.annotations) {
                ann[id] = parts;
            }
            emit_doc("annotations", ann);
        }
        if (bundle.ground_truth) {
            emit_doc("ground_truth", ground_truth_json(*bundle.ground_truth));
        }

        for (const auto& [ref, bytes] : bundle.thumbnails) {
            if (!safe_relative(ref)) {
                throw BundleError("thumbnails", "thumbnail reference escapes the bundle: " + ref);
            }
            write_file(temp / ref, bytes);
        }

        const json manifest = {
            {"format", "protosplit-bundle"},
            {"schema_version", std::to_string(bundle_schema_major) + "." +
                                   std::to_string(bundle_schema_minor)},
            {"feature_width", bundle.bank.feature_width()},
            {"prototypes", bundle.bank.num_prototypes()},
            {"classes", bundle.bank.num_classes()},
            {"class_names", bundle.bank.class_names},
            {"grid", {{"h", bundle.corpus.grid_h}, {"w", bundle.corpus.grid_w}}},
            {"counts",
             {{"patches", bundle.corpus.patches.size()},
              {"images", bundle.corpus.images.size()},
              {"thumbnails", bundle.thumbnails.size()}}},
            {"has_annotations", bundle.annotations.has_value()},
            {"has_ground_truth", bundle.ground_truth.has_value()},
            {"has_activation_cache", all_cached},
            {"blocks", blocks},
            {"documents", documents},
        };
        write_file(temp / manifest_name, serialize(manifest));

        if (fs::exists(target)) {
            fs::rename(target, retired);
            fs::rename(temp, target);
            fs::remove_all(retired);
        } else {
            fs::rename(temp, target);
        }
    } catch (const BundleError&) {
        std::error_code ignored;
        fs::remove_all(temp, ignored);
        throw;
    } catch (const std::exception& e) {
        std::error_code ignored;
        fs::remove_all(temp, ignored);
        throw BundleError("bundle", e.what());
    }
}

PatchBundle read_bundle(const fs::path& path) {
    if (!fs::is_directory(path)) {
        throw BundleError("bundle", "no bundle directory at " + path.string());
    }
    json manifest;
    try {
        manifest = json::parse(read_file(path / manifest_name));
    } catch (const json::exception& e) {
        throw BundleError("manifest", e.what());
    }

    try {
        const auto version = manifest.at("schema_version").get<std::string>();
        const auto major = std::stoul(version.substr(0, version.find('.')));
        if (major != bundle_schema_major) {
            throw BundleError("manifest", "unsupported schema major version " + version);
        }

        auto load_block = [&](const std::string& name) {
            const auto& entry = manifest.at("blocks").at(name);
            const std::string bytes = read_file(path / entry.at("file").get<std::string>());
            if (crc32_of(bytes) != entry.at("crc32").get<std::uint32_t>()) {
                throw BundleError(name, "CRC32 mismatch");
            }
            Matrix m = decode_block(bytes, name);
            if (m.rows() != entry.at("rows").get<std::size_t>() ||
                m.cols() != entry.at("cols").get<std::size_t>()) {
                throw BundleError(name, "dimensions disagree with the manifest");
            }
            return m;
        };
        auto load_doc = [&](const std::string& name) {
            const auto& entry = manifest.at("documents").at(name);
            const std::string text = read_file(path / entry.at("file").get<std::string>());
            if (crc32_of(text) != entry.at("crc32").get<std::uint32_t>()) {
                throw BundleError(name, "CRC32 mismatch");
            }
            try {
                return json::parse(text);
            } catch (const json::exception& e) {
                throw BundleError(name, e.what());
            }
        };

        const auto width = manifest.at("feature_width").get<std::size_t>();
        const auto prototypes = manifest.at("prototypes").get<std::size_t>();
        const auto classes = manifest.at("classes").get<std::size_t>();
        const auto patch_count = manifest.at("counts").at("patches").get<std::size_t>();
        const auto image_count = manifest.at("counts").at("images").get<std::size_t>();

        PatchBundle bundle;
        bundle.bank.kernels = load_block("kernels");
        bundle.bank.head = load_block("head");
        bundle.bank.class_names = manifest.value("class_names", std::vector<std::string>{});
        if (bundle.bank.kernels.rows() != prototypes) {
            throw BundleError("kernels", "manifest declares " + std::to_string(prototypes) +
                                             " prototypes, block holds " +
                                             std::to_string(bundle.bank.kernels.rows()));
        }
        if (bundle.bank.kernels.cols() != width) {
            throw BundleError("kernels", "kernel width disagrees with feature_width");
        }
        if (bundle.bank.head.rows() != prototypes || bundle.bank.head.cols() != classes) {
            throw BundleError("head", "head shape disagrees with the manifest");
        }
        try {
            bundle.bank.validate();
        } catch (const std::exception& e) {
            throw BundleError("head", e.what());
        }

        const Matrix features = load_block("features");
        if (features.rows() != patch_count || features.cols() != width) {
            throw BundleError("features", "feature block disagrees with the manifest counts");
        }
        std::optional<Matrix> cache;
        if (manifest.value("has_activation_cache", false)) {
            cache = load_block("activations");
            if (cache->rows() != patch_count || cache->cols() != prototypes) {
                throw BundleError("activations", "activation cache shape disagrees with manifest");
            }
        }

        const json metadata = load_doc("metadata");
        bundle.corpus.grid_h = manifest.at("grid").at("h").get<std::uint32_t>();
        bundle.corpus.grid_w = manifest.at("grid").at("w").get<std::uint32_t>();
        for (const auto& image : metadata.at("images")) {
            bundle.corpus.images.push_back(
                {image.at("id").get<std::string>(), image.at("label").get<std::size_t>()});
        }
        const auto& patches = metadata.at("patches");
        if (patches.size() != patch_count || bundle.corpus.images.size() != image_count) {
            throw BundleError("metadata", "patch or image count disagrees with the manifest");
        }
        for (std::size_t i = 0; i < patches.size(); ++i) {
            PatchRecord patch;
            patch.id = patches[i].at("id").get<std::string>();
            patch.image_id = patches[i].at("image_id").get<std::string>();
            patch.location = {patches[i].at("h").get<std::uint32_t>(),
                              patches[i].at("w").get<std::uint32_t>()};
            patch.thumbnail_ref = patches[i].value("thumbnail", std::string{});
            patch.feature.assign(features.row(i).begin(), features.row(i).end());
            if (cache) {
                patch.activation_cache =
                    std::vector<double>(cache->row(i).begin(), cache->row(i).end());
            }
            bundle.corpus.patches.push_back(std::move(patch));
        }
        try {
            bundle.corpus.validate(width);
        } catch (const std::exception& e) {
            throw BundleError("metadata", e.what());
        }
        for (const auto& image : bundle.corpus.images) {
            if (image.label >= classes) {
                throw BundleError("metadata", "image " + image.id + " has an out-of-range class");
            }
        }

        for (const auto& patch : bundle.corpus.patches) {
            if (patch.thumbnail_ref.empty() || bundle.thumbnails.contains(patch.thumbnail_ref)) {
                continue;
            }
            if (!safe_relative(patch.thumbnail_ref)) {
                throw BundleError("thumbnails", "thumbnail reference escapes the bundle");
            }
            const fs::path file = path / patch.thumbnail_ref;
            if (fs::exists(file)) {
                bundle.thumbnails.emplace(patch.thumbnail_ref, read_file(file));
            }
        }
        const auto expected_thumbs = manifest.at("counts").value("thumbnails", bundle.thumbnails.size());
        if (bundle.thumbnails.size() != expected_thumbs) {
            throw BundleError("thumbnails", "thumbnail count disagrees with the manifest");
        }

        if (manifest.value("has_annotations", false)) {
            PartAnnotations annotations;
            const json doc = load_doc("annotations");
            for (const auto& [id, parts] : doc.items()) {
                annotations.emplace(id, parts.get<PartSet>());
            }
            bundle.annotations = std::move(annotations);
        }
        if (manifest.value("has_ground_truth", false)) {
            bundle.ground_truth = ground_truth_from_json(load_doc("ground_truth"));
        }
        return bundle;
    } catch (const BundleError&) {
        throw;
    } catch (const std::exception& e) {
        throw BundleError("manifest", e.what());
    }
}

} // namespace protosplit
