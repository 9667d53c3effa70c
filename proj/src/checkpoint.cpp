#include "dyad/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

namespace dyad {

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw CheckpointError(CheckpointErrorCode::Truncated, "checkpoint: truncated u32");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw CheckpointError(CheckpointErrorCode::Truncated, "checkpoint: truncated u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_u32(os, v); }
std::uint32_t read_u32(std::istream& is) { return get_u32(is); }

void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    os.put(static_cast<char>(0));  // dtype f32
    os.put(static_cast<char>(t.shape.size()));
    for (std::size_t ext : t.shape) put_u64(os, ext);
    // payload is little-endian f32; direct write is exact on this target
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * 4));
}

std::pair<std::string, Tensor> read_tensor_entry(std::istream& is) {
    const std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw CheckpointError(CheckpointErrorCode::Truncated, "tensor entry: truncated name");
    const int dtype = is.get();
    const int rank = is.get();
    if (dtype < 0 || rank < 0) {
        throw CheckpointError(CheckpointErrorCode::Truncated, "tensor entry: truncated header");
    }
    if (dtype != 0) {
        throw CheckpointError(CheckpointErrorCode::BadDtype,
                              "tensor entry: unsupported dtype " + std::to_string(dtype));
    }
    std::vector<std::size_t> shape(static_cast<std::size_t>(rank));
    std::size_t numel = 1;
    for (auto& ext : shape) {
        const std::uint64_t e = get_u64(is);
        if (e == 0 || e > (1ULL << 32)) {
            throw CheckpointError(CheckpointErrorCode::BadShape, "tensor entry: implausible extent");
        }
        ext = static_cast<std::size_t>(e);
        numel *= ext;
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(numel * 4));
    if (!is) throw CheckpointError(CheckpointErrorCode::Truncated, "tensor entry: truncated payload for " + name);
    return {std::move(name), std::move(t)};
}

void save_params(const ParamStore& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: cannot open for write: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(store.size()));
    for (const auto& e : store) {
        write_tensor_entry(os, e.name, e.value);
    }
    os.flush();
    if (!os) throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: write failed: " + path);
}

ParamStore load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointErrorCode::Io, "checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError(CheckpointErrorCode::BadMagic, "checkpoint: bad magic in " + path);
    }
    const std::uint32_t version = get_u32(is);
    if (version != kVersion) {
        throw CheckpointError(CheckpointErrorCode::BadVersion,
                              "checkpoint: unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = get_u32(is);
    ParamStore store;
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor_entry(is);
        if (store.has(name)) {
            throw CheckpointError(CheckpointErrorCode::DuplicateName, "checkpoint: duplicate entry " + name);
        }
        store.add(std::move(name), std::move(t));
    }
    return store;
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t file_digest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(CheckpointErrorCode::Io, "digest: cannot open " + path);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[65536];
    while (is) {
        is.read(buf, sizeof buf);
        const std::streamsize got = is.gcount();
        if (got > 0) h = fnv1a64(buf, static_cast<std::size_t>(got), h);
    }
    return h;
}

}  // namespace dyad
