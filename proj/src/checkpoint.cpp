#include "prem/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace prem::checkpoint {
namespace {

constexpr std::size_t kMagicLen = sizeof(kMagic) - 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        pos_ += sizeof(T);
        T value;
        std::memcpy(&value, raw, sizeof(T));
        return value;
    }

    std::string string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
    }

    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode(const Archive& archive) {
    std::vector<std::uint8_t> out(kMagic, kMagic + kMagicLen);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.size()));
    for (const auto& [name, rec] : archive) {
        if (shape_numel(rec.shape) != rec.values.size())
            throw CheckpointError("record " + name + " has inconsistent shape");
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put<std::uint8_t>(out, kDtypeF64);
        put<std::uint32_t>(out, static_cast<std::uint32_t>(rec.shape.size()));
        for (auto d : rec.shape) put<std::uint64_t>(out, d);
        for (double v : rec.values) put<double>(out, v);
    }
    return out;
}

Archive decode(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.string(kMagicLen) != std::string(kMagic, kMagicLen)) throw CheckpointError("bad checkpoint magic");
    const auto count = r.get<std::uint32_t>();
    Archive archive;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = r.get<std::uint32_t>();
        std::string name = r.string(name_len);
        const auto dtype = r.get<std::uint8_t>();
        if (dtype != kDtypeF64) throw CheckpointError("unsupported dtype tag for " + name);
        const auto ndim = r.get<std::uint32_t>();
        Record rec;
        for (std::uint32_t d = 0; d < ndim; ++d) rec.shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
        rec.values.resize(shape_numel(rec.shape));
        for (auto& v : rec.values) v = r.get<double>();
        if (!archive.emplace(name, std::move(rec)).second) throw CheckpointError("duplicate record " + name);
    }
    if (!r.done()) throw CheckpointError("trailing bytes after checkpoint records");
    return archive;
}

void write(const std::filesystem::path& path, const Archive& archive) {
    const auto bytes = encode(archive);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + path.string());
}

Archive read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode(bytes);
}

void export_params(const ParamStore& store, Archive& archive) {
    for (const auto& [name, t] : store.all()) archive[name] = Record{t.shape(), t.to_vector()};
}

void import_params(const Archive& archive, ParamStore& store) {
    for (auto& [name, t] : store.all()) {
        auto it = archive.find(name);
        if (it == archive.end()) throw CheckpointError("checkpoint is missing parameter " + name);
        if (it->second.shape != t.shape())
            throw CheckpointError("shape mismatch for " + name + ": checkpoint " + shape_string(it->second.shape) +
                                  ", model " + shape_string(t.shape()));
        auto dst = t.mutable_values();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
}

}  // namespace prem::checkpoint
