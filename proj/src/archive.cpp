#include "dfmad/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "dfmad/error.hpp"

namespace dfmad {

namespace {

constexpr char kMagic[8] = {'D', 'F', 'M', 'A', 'D', 'A', 'R', 'C'};
constexpr std::uint8_t kDtypeF64 = 1;

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value)
{
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

void put_string(std::ostream& out, const std::string& s)
{
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
public:
    Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

    template <typename T>
    T get()
    {
        T value{};
        read(reinterpret_cast<char*>(&value), sizeof(T));
        return value;
    }

    std::string get_string()
    {
        const auto len = get<std::uint32_t>();
        if (len > (1u << 24)) {
            throw IoError("corrupt archive string length in " + path_.string());
        }
        std::string s(len, '\0');
        read(s.data(), len);
        return s;
    }

    void read(char* dst, std::size_t n)
    {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (!in_) {
            throw IoError("truncated archive " + path_.string());
        }
    }

private:
    std::istream& in_;
    const std::filesystem::path& path_;
};

} // namespace

std::string format_double(double value)
{
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

void ArrayArchive::add(std::string name, Tensor tensor, bool frozen)
{
    arrays.push_back({std::move(name), std::move(tensor), frozen});
}

const NamedArray& ArrayArchive::get(const std::string& name) const
{
    auto it = std::find_if(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
    if (it == arrays.end()) {
        throw IoError("archive has no array named '" + name + "'");
    }
    return *it;
}

bool ArrayArchive::contains(const std::string& name) const
{
    return std::any_of(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
}

const std::string& ArrayArchive::meta(const std::string& key) const
{
    auto it = metadata.find(key);
    if (it == metadata.end()) {
        throw IoError("archive has no metadata key '" + key + "'");
    }
    return it->second;
}

void write_archive(const std::filesystem::path& path, const ArrayArchive& archive)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kArchiveVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.metadata.size()));
    for (const auto& [key, value] : archive.metadata) {
        put_string(out, key);
        put_string(out, value);
    }
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.arrays.size()));
    for (const auto& a : archive.arrays) {
        put_string(out, a.name);
        put<std::uint8_t>(out, kDtypeF64);
        put<std::uint8_t>(out, a.frozen ? 1 : 0);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(a.tensor.rank()));
        for (std::size_t d : a.tensor.shape()) {
            put<std::uint64_t>(out, d);
        }
    }
    for (const auto& a : archive.arrays) {
        const auto data = a.tensor.data();
        out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
    }
    if (!out) {
        throw IoError("failed writing " + path.string());
    }
}

ArrayArchive read_archive(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    Reader r(in, path);
    char magic[8];
    r.read(magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw IoError(path.string() + " is not a dfmad archive");
    }
    const auto version = r.get<std::uint32_t>();
    if (version != kArchiveVersion) {
        throw IoError(path.string() + ": unsupported archive version " + std::to_string(version));
    }
    ArrayArchive archive;
    const auto n_meta = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string key = r.get_string();
        archive.metadata[key] = r.get_string();
    }
    const auto n_arrays = r.get<std::uint32_t>();
    std::vector<std::pair<NamedArray, Shape>> manifest;
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        NamedArray a;
        a.name = r.get_string();
        if (r.get<std::uint8_t>() != kDtypeF64) {
            throw IoError(path.string() + ": array '" + a.name + "' has an unsupported dtype");
        }
        a.frozen = r.get<std::uint8_t>() != 0;
        const auto ndim = r.get<std::uint32_t>();
        Shape shape(ndim);
        for (auto& d : shape) {
            d = r.get<std::uint64_t>();
        }
        manifest.emplace_back(std::move(a), std::move(shape));
    }
    for (auto& [a, shape] : manifest) {
        std::vector<double> data(shape_numel(shape));
        r.read(reinterpret_cast<char*>(data.data()), data.size() * sizeof(double));
        a.tensor = Tensor(std::move(shape), std::move(data));
        archive.arrays.push_back(std::move(a));
    }
    return archive;
}

} // namespace dfmad
