#pragma once

// Shared plumbing: error taxonomy, deterministic random source, stable
// hashing, and number formatting for emitted artifacts.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace latentlab {

inline constexpr std::string_view kVersion = "0.1.0";

// ----------------------------- errors -----------------------------

// Invalid specs, flags, or config files. CLI exit code 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Missing or unreadable inputs. CLI exit code 3.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint magic/version/shape mismatch. CLI exit code 4.
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf encountered during training. CLI exit code 5.
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ----------------------------- random source -----------------------------

// Deterministic RNG with self-contained distributions. std:: distribution
// objects are implementation-defined, so sampling is done by hand to keep
// datasets byte-identical for a given seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform integer in [lo, hi], inclusive. Rejection sampling, unbiased.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw ConfigError("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        if (span == 0) return static_cast<std::int64_t>(gen_());  // full 64-bit range
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return lo + static_cast<std::int64_t>(r % span);
    }

    // Uniform double in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller with one cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, r2;
        do {
            u = 1.0 - uniform01();  // (0, 1]
            r2 = uniform01();
        } while (u <= 0.0);
        const double mag = std::sqrt(-2.0 * std::log(u));
        const double ang = 6.283185307179586477 * r2;
        spare_ = mag * std::sin(ang);
        has_spare_ = true;
        return mag * std::cos(ang);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent child stream; label keeps sibling streams decorrelated.
    Rng derive(std::uint64_t label) const {
        return Rng(mix64(seed_echo_ ^ (0x9e3779b97f4a7c15ULL * (label + 1))));
    }

    static std::uint64_t mix64(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    static Rng seeded(std::uint64_t seed) {
        Rng r(seed);
        r.seed_echo_ = seed;
        return r;
    }

  private:
    std::mt19937_64 gen_;
    std::uint64_t seed_echo_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// ----------------------------- hashing -----------------------------

inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::uint64_t hash_combine_u64(std::uint64_t h, std::uint64_t v) {
    return fnv1a64(&v, sizeof(v), h);
}

// ----------------------------- formatting -----------------------------

// Round-at-emission policy for CSV/report floats: 6 significant digits,
// fixed-form for ordinary magnitudes, trailing zeros trimmed.
inline std::string format_sig6(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace latentlab
