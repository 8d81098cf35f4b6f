#pragma once

#include "ttadapt/error.hpp"
#include "ttadapt/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace ttadapt {

// Layout (all integers little-endian):
//   "MTTC" | u32 version | u64 count |
//   count × { u64 name_len | name | u64 rank | rank × u64 extent | u32 dtype (0 = f64) | f64 values }
//   | u64 FNV-1a of every preceding byte
inline constexpr char kCheckpointMagic[4] = {'M', 'T', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeFloat64 = 0;

using NamedTensors = std::vector<std::pair<std::string, DenseTensor>>;

class CheckpointError : public IoError {
public:
    enum class Kind { Io, BadMagic, UnsupportedVersion, Truncated, ChecksumMismatch, Malformed };

    CheckpointError(Kind kind, const std::string& msg) : IoError(msg), kind_(kind) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline std::uint64_t fnv1a64(std::span<const unsigned char> bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}
inline void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class ByteReader {
public:
    explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw CheckpointError(CheckpointError::Kind::Truncated,
                                  std::string("checkpoint truncated while reading ") + what + " at byte " +
                                      std::to_string(pos_));
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 8;
        return v;
    }
    std::span<const unsigned char> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    [[nodiscard]] std::size_t position() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

private:
    std::span<const unsigned char> bytes_;
    std::size_t pos_ = 0;
};

} // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const NamedTensors& tensors) {
    std::set<std::string> names;
    for (const auto& [name, t] : tensors) {
        if (!names.insert(name).second) throw ConfigError("checkpoint: duplicate tensor name '" + name + "'");
    }
    std::vector<unsigned char> out(std::begin(kCheckpointMagic), std::end(kCheckpointMagic));
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, tensors.size());
    for (const auto& [name, t] : tensors) {
        detail::put_u64(out, name.size());
        out.insert(out.end(), name.begin(), name.end());
        detail::put_u64(out, t.rank());
        for (std::size_t e : t.shape()) detail::put_u64(out, e);
        detail::put_u32(out, kDtypeFloat64);
        for (double v : t.values()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
    detail::put_u64(out, fnv1a64(out));
    return out;
}

inline NamedTensors decode_checkpoint(std::span<const unsigned char> bytes) {
    detail::ByteReader rd(bytes);
    const auto magic = rd.take(4, "magic");
    if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0) {
        throw CheckpointError(CheckpointError::Kind::BadMagic, "checkpoint: bad magic, not an MTTC file");
    }
    const std::uint32_t version = rd.u32("version");
    if (version != kCheckpointVersion) {
        throw CheckpointError(CheckpointError::Kind::UnsupportedVersion,
                              "checkpoint: unsupported format version " + std::to_string(version));
    }
    const std::uint64_t count = rd.u64("tensor count");
    NamedTensors out;
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t name_len = rd.u64("name length");
        const auto name_bytes = rd.take(name_len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        const std::uint64_t rank = rd.u64("rank");
        if (rank > rd.remaining() / 8) rd.need(rd.remaining() + 1, "extents");
        Shape shape;
        std::uint64_t elems = 1;
        for (std::uint64_t a = 0; a < rank; ++a) {
            const std::uint64_t e = rd.u64("extent");
            if (e == 0) throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: zero extent in '" + name + "'");
            if (elems > std::numeric_limits<std::uint64_t>::max() / e) {
                throw CheckpointError(CheckpointError::Kind::Malformed, "checkpoint: element count overflows in '" + name + "'");
            }
            shape.push_back(e);
            elems *= e;
        }
        const std::uint32_t dtype = rd.u32("dtype");
        if (dtype != kDtypeFloat64) {
            throw CheckpointError(CheckpointError::Kind::Malformed,
                                  "checkpoint: unknown dtype tag " + std::to_string(dtype) + " for '" + name + "'");
        }
        if (elems > rd.remaining() / 8) rd.need(rd.remaining() + 1, "values");
        std::vector<double> values(elems);
        for (auto& v : values) v = std::bit_cast<double>(rd.u64("values"));
        out.emplace_back(std::move(name), DenseTensor(std::move(shape), std::move(values)));
    }
    const std::size_t body = rd.position();
    const std::uint64_t stored = rd.u64("checksum");
    if (rd.remaining() != 0) {
        throw CheckpointError(CheckpointError::Kind::Malformed,
                              "checkpoint: " + std::to_string(rd.remaining()) + " trailing bytes after checksum");
    }
    if (fnv1a64(bytes.first(body)) != stored) {
        throw CheckpointError(CheckpointError::Kind::ChecksumMismatch, "checkpoint: checksum mismatch");
    }
    return out;
}

inline void save_checkpoint(const NamedTensors& tensors, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(tensors);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot open '" + path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: write failed for '" + path.string() + "'");
}

inline NamedTensors load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError(CheckpointError::Kind::Io, "checkpoint: cannot open '" + path.string() + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

} // namespace ttadapt
