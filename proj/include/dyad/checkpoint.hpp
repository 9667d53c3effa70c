#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <utility>

#include "dyad/param_store.hpp"

namespace dyad {

enum class CheckpointErrorCode {
    Io,
    BadMagic,
    BadVersion,
    Truncated,
    DuplicateName,
    BadDtype,
    BadShape,
};

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorCode code, const std::string& msg)
        : std::runtime_error(msg), code_(code) {}
    CheckpointErrorCode code() const { return code_; }

private:
    CheckpointErrorCode code_;
};

// Binary layout: magic "AFCK", u32 version=1, u32 entry count; per entry
// u32 name length, UTF-8 name, u8 dtype (0 = f32), u8 rank, rank x u64
// extents, row-major little-endian f32 payload.
void save_params(const ParamStore& store, const std::string& path);
ParamStore load_params(const std::string& path);

// 64-bit FNV-1a, used for artifact digests.
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t file_digest(const std::string& path);

// Single named-tensor entry in the checkpoint encoding; shared by the
// dataset and preference-pair containers.
void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t);
std::pair<std::string, Tensor> read_tensor_entry(std::istream& is);
void write_u32(std::ostream& os, std::uint32_t v);
std::uint32_t read_u32(std::istream& is);

}  // namespace dyad
