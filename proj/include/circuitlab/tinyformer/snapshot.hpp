#pragma once

#include "circuitlab/tinyformer/model.hpp"

#include <filesystem>
#include <stdexcept>

namespace clab {

/// Raised on bad magic, unsupported version or truncated snapshot files.
class SnapshotError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kSnapshotVersion = 1;

// Layout: "CLABSNAP", u32 version, config fields, then every component's
// matrices in graph node order as (u64 rows, u64 cols, rows*cols f64).
// All integers and reals are little-endian.
void write_snapshot(const TinyFormer& model, const std::filesystem::path& path);
TinyFormer read_snapshot(const std::filesystem::path& path);

std::string snapshot_bytes(const TinyFormer& model);
TinyFormer snapshot_from_bytes(const std::string& bytes);

}  // namespace clab
