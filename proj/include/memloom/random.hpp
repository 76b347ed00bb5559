#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace memloom {

using Rng = std::mt19937_64;

// splitmix64 finalizer
constexpr std::uint64_t mix64(std::uint64_t z) noexcept
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30U)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27U)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31U);
}

// Derives an independent named stream from a run seed, e.g. sub_seed(seed, "replay").
constexpr std::uint64_t sub_seed(std::uint64_t seed, std::string_view name) noexcept
{
    std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
    for (char c : name) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return mix64(seed ^ mix64(h));
}

inline Rng make_rng(std::uint64_t seed, std::string_view name) { return Rng(sub_seed(seed, name)); }

} // namespace memloom
