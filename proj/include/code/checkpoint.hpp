#pragma once

// Versioned checkpoint container:
//
//   "CODECKPT"            8-byte magic
//   u32 format_version
//   u64 header_len, header (UTF-8 JSON)
//   u32 blob_count, then per blob: u32 name_len, name, u64 size, bytes
//   u32 crc32 over everything above
//
// Integers are little-endian. Writes go to a temporary file that is renamed
// into place.

#include "code/tensor.hpp"

#include <json.hpp>
#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

namespace code {

struct Archive {
    static constexpr std::uint32_t kFormatVersion = 1;
    nlohmann::json header;
    std::vector<std::pair<std::string, std::vector<char>>> blobs;

    const std::vector<char>* find(const std::string& name) const {
        for (const auto& [n, b] : blobs)
            if (n == name) return &b;
        return nullptr;
    }

    template <typename T>
    void put(const std::string& name, const std::vector<T>& values) {
        std::vector<char> bytes(values.size() * sizeof(T));
        if (!values.empty()) std::memcpy(bytes.data(), values.data(), bytes.size());
        blobs.emplace_back(name, std::move(bytes));
    }

    template <typename T>
    std::vector<T> get(const std::string& name) const {
        const auto* b = find(name);
        if (!b) throw Error("checkpoint: missing blob '" + name + "'");
        if (b->size() % sizeof(T) != 0) throw Error("checkpoint: blob '" + name + "' has a bad size");
        std::vector<T> out(b->size() / sizeof(T));
        if (!out.empty()) std::memcpy(out.data(), b->data(), b->size());
        return out;
    }
};

namespace archive_detail {

inline constexpr char kMagic[8] = {'C', 'O', 'D', 'E', 'C', 'K', 'P', 'T'};

template <typename U>
void put_int(std::vector<char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename U>
U get_int(const std::vector<char>& in, std::size_t& pos) {
    if (pos + sizeof(U) > in.size()) throw Error("checkpoint: unexpected end of archive");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
        v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += sizeof(U);
    return v;
}

inline std::uint32_t crc(const char* data, std::size_t n) {
    uLong c = crc32(0L, Z_NULL, 0);
    while (n > 0) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        c = crc32(c, reinterpret_cast<const Bytef*>(data), chunk);
        data += chunk;
        n -= chunk;
    }
    return static_cast<std::uint32_t>(c);
}

}  // namespace archive_detail

inline std::vector<char> encode_archive(const Archive& a) {
    using namespace archive_detail;
    std::vector<char> out(std::begin(kMagic), std::end(kMagic));
    put_int<std::uint32_t>(out, Archive::kFormatVersion);
    const std::string header = a.header.dump();
    put_int<std::uint64_t>(out, header.size());
    out.insert(out.end(), header.begin(), header.end());
    put_int<std::uint32_t>(out, static_cast<std::uint32_t>(a.blobs.size()));
    for (const auto& [name, bytes] : a.blobs) {
        put_int<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        put_int<std::uint64_t>(out, bytes.size());
        out.insert(out.end(), bytes.begin(), bytes.end());
    }
    put_int<std::uint32_t>(out, crc(out.data(), out.size()));
    return out;
}

inline Archive decode_archive(const std::vector<char>& in) {
    using namespace archive_detail;
    if (in.size() < sizeof(kMagic) + 4 + 8 + 4 + 4 || std::memcmp(in.data(), kMagic, sizeof(kMagic)) != 0)
        throw Error("checkpoint: not a checkpoint archive");
    std::size_t tail = in.size() - 4;
    std::size_t pos = tail;
    const auto stored = get_int<std::uint32_t>(in, pos);
    if (stored != crc(in.data(), tail)) throw Error("checkpoint: checksum mismatch (corrupt or truncated archive)");
    pos = sizeof(kMagic);
    const auto version = get_int<std::uint32_t>(in, pos);
    if (version != Archive::kFormatVersion)
        throw Error("checkpoint: format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(Archive::kFormatVersion) + ")");
    Archive a;
    const auto hlen = get_int<std::uint64_t>(in, pos);
    if (pos + hlen > tail) throw Error("checkpoint: header overruns archive");
    a.header = nlohmann::json::parse(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                     in.begin() + static_cast<std::ptrdiff_t>(pos + hlen));
    pos += hlen;
    const auto count = get_int<std::uint32_t>(in, pos);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto nlen = get_int<std::uint32_t>(in, pos);
        if (pos + nlen > tail) throw Error("checkpoint: blob name overruns archive");
        std::string name(in.begin() + static_cast<std::ptrdiff_t>(pos),
                         in.begin() + static_cast<std::ptrdiff_t>(pos + nlen));
        pos += nlen;
        const auto size = get_int<std::uint64_t>(in, pos);
        if (pos + size > tail) throw Error("checkpoint: blob overruns archive");
        a.blobs.emplace_back(std::move(name), std::vector<char>(in.begin() + static_cast<std::ptrdiff_t>(pos),
                                                                in.begin() + static_cast<std::ptrdiff_t>(pos + size)));
        pos += size;
    }
    return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
    const auto bytes = encode_archive(a);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("checkpoint: cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw Error("checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Archive read_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("checkpoint: cannot open " + path.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_archive(bytes);
}

}  // namespace code
