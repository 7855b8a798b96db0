#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "klab/array.hpp"

namespace klab {

// Versioned binary training snapshot. The format is:
//   magic "KLABCKPT", version u32, step u64, adam_t u64,
//   rng section, scalar section, counter section, array section,
//   trailing FNV-1a 64 checksum over everything before it.
// All integers and doubles little-endian; arrays carry length-prefixed names.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::uint32_t version = kVersion;
    std::uint64_t step = 0;
    std::uint64_t adam_t = 0;
    std::map<std::string, std::array<std::uint64_t, 4>> rng_states;
    std::map<std::string, double> scalars;
    std::map<std::string, std::uint64_t> counters;

    struct Entry {
        std::string name;
        DenseArray value;
        DenseArray moment1;  // may be empty
        DenseArray moment2;  // may be empty
    };
    std::vector<Entry> arrays;

    const Entry* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);

// Throws DataError on a bad checksum or truncation, and names both versions
// when the file's version tag is foreign.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace klab
