#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dfmad/tensor.hpp"

namespace dfmad {

// Container of named f64 arrays plus string metadata, used for backbone,
// adapter and head checkpoints.
//
// Byte layout (all integers little-endian):
//   magic    8 bytes  "DFMADARC"
//   version  u32      kArchiveVersion
//   n_meta   u32,  then n_meta x { u32 key_len, key, u32 value_len, value }
//   n_arrays u32,  then the manifest: n_arrays x
//            { u32 name_len, name, u8 dtype (1 = f64), u8 frozen, u32 ndim, ndim x u64 dim }
//   data     arrays in manifest order, each prod(dims) x f64 (IEEE-754, little-endian)
inline constexpr std::uint32_t kArchiveVersion = 1;

struct NamedArray {
    std::string name;
    Tensor tensor;
    bool frozen = true;
};

struct ArrayArchive {
    std::map<std::string, std::string> metadata;
    std::vector<NamedArray> arrays;

    void add(std::string name, Tensor tensor, bool frozen);
    const NamedArray& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::string& meta(const std::string& key) const;
};

// Shortest round-trippable decimal form of a double.
std::string format_double(double value);

void write_archive(const std::filesystem::path& path, const ArrayArchive& archive);
ArrayArchive read_archive(const std::filesystem::path& path);

} // namespace dfmad
