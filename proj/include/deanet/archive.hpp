#pragma once

// Bit-exact named-tensor archive.
//
// Layout (all integers little-endian):
//   magic   "DEAW"
//   u32     version (= 1)
//   u32     tensor count
//   per tensor, sorted by name:
//     u16   name length, then the UTF-8 name
//     u8    dtype (0 = f32)
//     u8    ndim (1..4)
//     u32   dims[ndim]
//     raw   little-endian f32 payload

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace deanet {

struct ArchiveError : public std::runtime_error {
    enum class Code {
        BadMagic,
        BadVersion,
        Truncated,
        DuplicateName,
        DimOverflow,
        TrailingData,
        Io,
    };

    ArchiveError(Code c, const std::string& msg) : std::runtime_error(msg), code(c) {}

    Code code;
};

struct ArchiveEntry {
    std::vector<std::uint32_t> dims;  // logical dims, 1..4 of them
    std::vector<float> data;
};

/// Named f32 tensor set with a canonical (name-sorted) byte layout.
class WeightArchive {
public:
    static constexpr char kMagic[4] = {'D', 'E', 'A', 'W'};
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::uint64_t kMaxElems = std::uint64_t(1) << 31;

    void put(const std::string& name, std::vector<std::uint32_t> dims,
             std::vector<float> data) {
        if (entries_.count(name)) {
            throw ArchiveError(ArchiveError::Code::DuplicateName,
                               "archive: duplicate tensor name '" + name + "'");
        }
        if (dims.empty() || dims.size() > 4) {
            throw ArchiveError(ArchiveError::Code::DimOverflow,
                               "archive: ndim must be 1..4 for '" + name + "'");
        }
        std::uint64_t n = 1;
        for (std::uint32_t d : dims) {
            n *= d;
            if (n > kMaxElems) {
                throw ArchiveError(ArchiveError::Code::DimOverflow,
                                   "archive: tensor '" + name + "' too large");
            }
        }
        if (n != data.size()) {
            throw ArchiveError(ArchiveError::Code::DimOverflow,
                               "archive: dims/payload mismatch for '" + name + "'");
        }
        entries_.emplace(name, ArchiveEntry{std::move(dims), std::move(data)});
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    const ArchiveEntry& get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) {
            throw ArchiveError(ArchiveError::Code::Truncated,
                               "archive: missing tensor '" + name + "'");
        }
        return it->second;
    }

    /// Names in canonical (sorted) order.
    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [name, entry] : entries_) out.push_back(name);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    std::vector<std::uint8_t> serialize() const {
        std::vector<std::uint8_t> out;
        out.insert(out.end(), kMagic, kMagic + 4);
        put_u32(out, kVersion);
        put_u32(out, std::uint32_t(entries_.size()));
        for (const auto& [name, entry] : entries_) {  // std::map iterates sorted
            if (name.size() > 0xffff) {
                throw ArchiveError(ArchiveError::Code::DimOverflow,
                                   "archive: name too long");
            }
            put_u16(out, std::uint16_t(name.size()));
            out.insert(out.end(), name.begin(), name.end());
            out.push_back(0);  // dtype f32
            out.push_back(std::uint8_t(entry.dims.size()));
            for (std::uint32_t d : entry.dims) put_u32(out, d);
            const std::size_t pos = out.size();
            out.resize(pos + entry.data.size() * 4);
            std::memcpy(out.data() + pos, entry.data.data(), entry.data.size() * 4);
        }
        return out;
    }

    static WeightArchive deserialize(const std::vector<std::uint8_t>& bytes) {
        Reader r{bytes.data(), bytes.size(), 0};
        char magic[4];
        r.read(magic, 4, "magic");
        if (std::memcmp(magic, kMagic, 4) != 0) {
            throw ArchiveError(ArchiveError::Code::BadMagic, "archive: bad magic");
        }
        const std::uint32_t version = r.u32("version");
        if (version != kVersion) {
            throw ArchiveError(ArchiveError::Code::BadVersion,
                               "archive: unsupported version " + std::to_string(version));
        }
        const std::uint32_t count = r.u32("tensor count");
        WeightArchive ar;
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::uint16_t name_len = r.u16("name length");
            std::string name(name_len, '\0');
            r.read(name.data(), name_len, "name");
            const std::uint8_t dtype = r.u8("dtype");
            if (dtype != 0) {
                throw ArchiveError(ArchiveError::Code::BadVersion,
                                   "archive: unsupported dtype " + std::to_string(dtype));
            }
            const std::uint8_t ndim = r.u8("ndim");
            if (ndim < 1 || ndim > 4) {
                throw ArchiveError(ArchiveError::Code::DimOverflow,
                                   "archive: bad ndim for '" + name + "'");
            }
            std::vector<std::uint32_t> dims(ndim);
            std::uint64_t numel = 1;
            for (auto& d : dims) {
                d = r.u32("dims");
                numel *= d;
                if (numel > kMaxElems) {
                    throw ArchiveError(ArchiveError::Code::DimOverflow,
                                       "archive: tensor '" + name + "' too large");
                }
            }
            std::vector<float> data(numel);
            r.read(data.data(), numel * 4, "payload");
            if (ar.contains(name)) {
                throw ArchiveError(ArchiveError::Code::DuplicateName,
                                   "archive: duplicate tensor name '" + name + "'");
            }
            ar.put(name, std::move(dims), std::move(data));
        }
        if (r.pos != r.len) {
            throw ArchiveError(ArchiveError::Code::TrailingData,
                               "archive: trailing bytes after last tensor");
        }
        return ar;
    }

    void save(const std::filesystem::path& path) const {
        write_file_atomic(path, serialize());
    }

    static WeightArchive load(const std::filesystem::path& path) {
        return deserialize(read_file(path));
    }

    // Plain file helpers shared by the tools layer. Writes go through a
    // temp file + rename so a crash never leaves a half-written output.
    static void write_file_atomic(const std::filesystem::path& path,
                                  const std::vector<std::uint8_t>& bytes) {
        const std::filesystem::path tmp = path.string() + ".tmp";
        {
            std::FILE* f = std::fopen(tmp.c_str(), "wb");
            if (!f) throw ArchiveError(ArchiveError::Code::Io, "cannot open " + tmp.string());
            const std::size_t written = bytes.empty()
                                            ? 0
                                            : std::fwrite(bytes.data(), 1, bytes.size(), f);
            const int rc = std::fclose(f);
            if (written != bytes.size() || rc != 0) {
                std::filesystem::remove(tmp);
                throw ArchiveError(ArchiveError::Code::Io, "short write to " + tmp.string());
            }
        }
        std::error_code ec;
        std::filesystem::rename(tmp, path, ec);
        if (ec) {
            std::filesystem::remove(tmp);
            throw ArchiveError(ArchiveError::Code::Io,
                               "cannot rename " + tmp.string() + ": " + ec.message());
        }
    }

    static std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw ArchiveError(ArchiveError::Code::Io, "cannot open " + path.string());
        std::fseek(f, 0, SEEK_END);
        const long len = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        std::vector<std::uint8_t> bytes(len > 0 ? std::size_t(len) : 0);
        const std::size_t got = bytes.empty() ? 0 : std::fread(bytes.data(), 1, bytes.size(), f);
        std::fclose(f);
        if (got != bytes.size()) {
            throw ArchiveError(ArchiveError::Code::Io, "short read from " + path.string());
        }
        return bytes;
    }

private:
    struct Reader {
        const std::uint8_t* base;
        std::size_t len;
        std::size_t pos;

        void read(void* dst, std::size_t n, const char* what) {
            if (pos + n > len) {
                throw ArchiveError(ArchiveError::Code::Truncated,
                                   std::string("archive: truncated while reading ") + what);
            }
            std::memcpy(dst, base + pos, n);
            pos += n;
        }
        std::uint8_t u8(const char* what) {
            std::uint8_t v;
            read(&v, 1, what);
            return v;
        }
        std::uint16_t u16(const char* what) {
            std::uint8_t b[2];
            read(b, 2, what);
            return std::uint16_t(b[0] | (b[1] << 8));
        }
        std::uint32_t u32(const char* what) {
            std::uint8_t b[4];
            read(b, 4, what);
            return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
                   (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
        }
    };

    static void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
        out.push_back(std::uint8_t(v & 0xff));
        out.push_back(std::uint8_t(v >> 8));
    }
    static void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
        out.push_back(std::uint8_t(v & 0xff));
        out.push_back(std::uint8_t((v >> 8) & 0xff));
        out.push_back(std::uint8_t((v >> 16) & 0xff));
        out.push_back(std::uint8_t((v >> 24) & 0xff));
    }

    std::map<std::string, ArchiveEntry> entries_;
};

}  // namespace deanet
