#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

namespace modseg {

constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Order-sensitive hash of a list of integer keys.
inline std::uint64_t hash_keys(std::initializer_list<std::uint64_t> keys) {
    std::uint64_t h = 0x243F6A8885A308D3ull;
    for (auto k : keys) h = splitmix64(h ^ splitmix64(k));
    return h;
}

/// Uniform double in [0, 1) from the top 53 bits.
inline double to_unit(std::uint64_t bits) {
    return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

/// Counter-based noise: a pure function of its keys, so per-cell noise can be
/// evaluated in any order or in parallel.
inline double hashed_uniform(std::initializer_list<std::uint64_t> keys) {
    return to_unit(hash_keys(keys));
}

inline double hashed_gaussian(std::initializer_list<std::uint64_t> keys) {
    const std::uint64_t h = hash_keys(keys);
    const double u1 = (static_cast<double>(h >> 40) + 0.5) * 0x1.0p-24;
    const double u2 = static_cast<double>((h >> 11) & 0x1FFFFFFFull) * 0x1.0p-29;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Seeded engine with platform-independent conversions (std distributions are
/// implementation-defined, which would break byte-identical archives).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

    double uniform() { return to_unit(engine_()); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }
    double gaussian() {
        const double u1 = 1.0 - uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace modseg
