#pragma once

#include <cstdint>
#include <initializer_list>
#include <string_view>

namespace occmesh {

// SplitMix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

// Folds a list of integers into a single 64-bit key.
std::uint64_t hash_key(std::initializer_list<std::uint64_t> parts);

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

// Counter-based generator: the i-th draw is a pure function of (key, i), so
// streams for different keys share no state and can be created in any order.
class KeyedRng {
public:
    explicit KeyedRng(std::uint64_t key) : key_(key) {}
    KeyedRng(std::initializer_list<std::uint64_t> key) : key_(hash_key(key)) {}

    std::uint64_t next_u64();
    // Uniform on [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal();

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace occmesh
