#include "crackseq/common.hpp"

namespace crackseq {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t sub_seed(std::uint64_t root, std::string_view name) {
    return mix64(root ^ fnv1a(name.data(), name.size()));
}

std::uint64_t sub_seed(std::uint64_t root, std::string_view name, std::uint64_t a,
                       std::uint64_t b) {
    std::uint64_t h = fnv1a(name.data(), name.size());
    h = fnv1a(&a, sizeof a, h);
    h = fnv1a(&b, sizeof b, h);
    return mix64(root ^ h);
}

}  // namespace crackseq
