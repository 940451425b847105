#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace crackseq {

// Thrown on malformed inputs (missing files, dimension mismatches, bad layouts).
// The CLI maps this to exit code 3; generic failures map to 4.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; used to fan one root seed out into named sub-streams.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t root, std::string_view name);

// Sub-stream keyed by (root, name, a, b); augmentation draws use (sample id, epoch).
std::uint64_t sub_seed(std::uint64_t root, std::string_view name, std::uint64_t a,
                       std::uint64_t b = 0);

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

// FNV-1a, used for dataset source checksums in manifests.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace crackseq
