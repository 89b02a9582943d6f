#pragma once

#include "protosplit/core_model.hpp"
#include "protosplit/ground_truth.hpp"
#include "protosplit/metrics.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace protosplit {

struct SyntheticWorkbench;

/// Any failure to read, validate or write a bundle. `block()` names the offending part.
class BundleError : public std::runtime_error {
public:
    BundleError(std::string block, const std::string& what);
    const std::string& block() const { return block_; }

private:
    std::string block_;
};

inline constexpr std::uint16_t bundle_schema_major = 1;
inline constexpr std::uint16_t bundle_schema_minor = 0;

/// On-disk interchange unit: model head, corpus, thumbnails and optional sidecars.
struct PatchBundle {
    PrototypeBank bank;
    Corpus corpus;
    std::map<std::string, std::string> thumbnails;   // thumbnail_ref -> opaque bytes
    std::optional<PartAnnotations> annotations;
    std::optional<GroundTruth> ground_truth;

    bool operator==(const PatchBundle&) const = default;
};

PatchBundle bundle_from_workbench(const SyntheticWorkbench& workbench);

/// "PPB1" | u16 schema major | u32 rows | u32 cols | rows*cols little-endian f32, row-major.
std::string encode_block(const Matrix& matrix);
Matrix decode_block(std::string_view bytes, const std::string& block_name);

std::uint32_t crc32_of(std::string_view bytes);

/// Writes into a sibling temporary directory and renames it into place.
void write_bundle(const PatchBundle& bundle, const std::filesystem::path& path);
PatchBundle read_bundle(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);

} // namespace protosplit
