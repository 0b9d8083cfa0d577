#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "prem/nn.hpp"

namespace prem {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary named-tensor archive.
///
/// Layout (little-endian):
///   "PREMCKPT1"                      9 magic bytes
///   u32 record_count
///   record_count x {
///     u32 name_len, name bytes (UTF-8)
///     u8  dtype (1 = float64)
///     u32 ndim, u64 dims[ndim]
///     f64 values[prod(dims)]          row-major
///   }
/// Records are written in lexicographic name order.
namespace checkpoint {

inline constexpr char kMagic[] = "PREMCKPT1";
inline constexpr std::uint8_t kDtypeF64 = 1;

struct Record {
    Shape shape;
    std::vector<double> values;
};

using Archive = std::map<std::string, Record>;

std::vector<std::uint8_t> encode(const Archive& archive);
Archive decode(const std::vector<std::uint8_t>& bytes);

void write(const std::filesystem::path& path, const Archive& archive);
Archive read(const std::filesystem::path& path);

/// Add every parameter of `store` to `archive` (names kept as-is).
void export_params(const ParamStore& store, Archive& archive);
/// Load every parameter of `store` from `archive`; shapes must match exactly.
void import_params(const Archive& archive, ParamStore& store);

}  // namespace checkpoint
}  // namespace prem
