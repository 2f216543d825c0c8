// Shared small utilities: error type, string formatting, seeded RNG streams,
// FNV-1a hashing. Everything in this library is deterministic given a seed.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace rcsl {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {

template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

} // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw Error(detail::cat(std::forward<Args>(args)...));
}

template <typename... Args>
void check(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

// 64-bit FNV-1a, used for checkpoint checksums and parameter fingerprints.
inline uint64_t fnv1a64(const void* bytes, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Mix a base seed with a named stream so that independent components draw from
// independent streams. Adding or removing one component must not shift the
// draws of another.
inline uint64_t seed_stream(uint64_t seed, const std::string& stream) {
    return fnv1a64(stream.data(), stream.size(), seed ^ 0x9e3779b97f4a7c15ull);
}

// Deterministic RNG. The engine is std::mt19937_64 (its textual serialization
// is pinned by the standard); all distributions are derived from raw engine
// draws by hand so results do not depend on libstdc++ internals.
class Rng {
public:
    Rng() : engine_(0x5eed) {}
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    // standard normal via Box-Muller (no cached spare, keeps state = engine state)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // normal(0, std) clipped by rejection to [-2*std, 2*std]
    double trunc_normal(double stddev) {
        for (;;) {
            double z = normal() * stddev;
            if (std::fabs(z) <= 2.0 * stddev) return z;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_;
        return os.str();
    }

    void deserialize(const std::string& s) {
        std::istringstream is(s);
        is >> engine_;
        if (!is) fail("Rng::deserialize: malformed engine state");
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
};

} // namespace rcsl
