#pragma once

// Structure of the affine update s -> s*x + b over Z_m: which multipliers
// act as permutations, how hard non-units contract the state space, and the
// law of the trailing all-unit suffix under uniform input sampling. Exact
// rational arithmetic throughout; floats only appear at the reporting
// boundary.

#include <boost/multiprecision/cpp_int.hpp>

#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "latentlab/common.hpp"

namespace latentlab::theory {

using Rational = boost::multiprecision::cpp_rational;

inline std::int64_t gcd_i64(std::int64_t a, std::int64_t b) { return std::gcd(a, b); }

inline bool is_unit(std::int64_t x, std::int64_t m) {
    if (m < 2 || x < 0 || x >= m) throw ConfigError("is_unit: need m >= 2 and 0 <= x < m");
    return std::gcd(x, m) == 1;
}

struct ContractionProfile {
    std::int64_t d = 0;           // gcd(x, m)
    std::int64_t image_size = 0;  // m / d
    std::int64_t fiber_size = 0;  // d
};

// Multiplication by x on Z_m has image of size m/d and every nonempty fiber
// has exactly d elements, d = gcd(x, m). gcd(0, m) = m: the constant map.
inline ContractionProfile contraction_profile(std::int64_t x, std::int64_t m) {
    if (m < 2 || x < 0 || x >= m) throw ConfigError("contraction_profile: need m >= 2 and 0 <= x < m");
    const std::int64_t d = std::gcd(x == 0 ? m : x, m);
    return {d, m / d, d};
}

// Exhaustively enumerate f(s) = s*x + b over Z_m and group by output value.
// Returns output -> preimage count for every attained output.
inline std::map<std::int64_t, std::int64_t> brute_force_fibers(std::int64_t x, std::int64_t b, std::int64_t m) {
    if (m < 2 || m > 10000) throw ConfigError("brute_force_fibers: m out of exhaustive range [2, 10^4]");
    if (x < 0 || x >= m || b < 0 || b >= m) throw ConfigError("brute_force_fibers: need x, b in [0, m)");
    std::map<std::int64_t, std::int64_t> fibers;
    for (std::int64_t s = 0; s < m; ++s) {
        fibers[(s * x + b) % m] += 1;
    }
    return fibers;
}

// Euler totient by trial-division factorization. Fine for m <= 10^6.
inline std::int64_t euler_phi(std::int64_t m) {
    if (m < 1) throw ConfigError("euler_phi: need m >= 1");
    std::int64_t result = m, n = m;
    for (std::int64_t p = 2; p * p <= n; ++p) {
        if (n % p == 0) {
            while (n % p == 0) n /= p;
            result -= result / p;
        }
    }
    if (n > 1) result -= result / n;
    return result;
}

// Probability that a multiplier drawn uniformly from [1, m-1] is a unit.
inline Rational unit_probability(std::int64_t m) {
    if (m < 2) throw ConfigError("unit_probability: need m >= 2");
    return Rational(euler_phi(m), m - 1);
}

// Tail law of L, the number of trailing steps after the last non-unit
// multiplier in x_1..x_T drawn uniformly from [1, m-1]:
//   Pr(L >= k) = u^k,   E[L] = sum_{k=1..T} u^k = u(1 - u^T)/(1 - u),
// with E[L] = T when u = 1 (prime m).
struct SuffixLaw {
    std::int64_t m = 0;
    std::int64_t horizon = 0;
    Rational u;                 // unit probability
    std::vector<Rational> tail; // tail[k] = Pr(L >= k), k = 0..T
    Rational expected_len;      // E[L]
    Rational expected_len_sq;   // E[L^2], for Monte Carlo error bars

    double u_f() const { return static_cast<double>(u); }
    double mean_f() const { return static_cast<double>(expected_len); }
    double variance_f() const { return static_cast<double>(expected_len_sq - expected_len * expected_len); }
};

inline SuffixLaw suffix_law(std::int64_t m, std::int64_t horizon) {
    if (horizon < 1) throw ConfigError("suffix_law: need T >= 1");
    SuffixLaw law;
    law.m = m;
    law.horizon = horizon;
    law.u = unit_probability(m);
    law.tail.resize(static_cast<std::size_t>(horizon) + 1);
    law.tail[0] = 1;
    for (std::int64_t k = 1; k <= horizon; ++k) {
        law.tail[static_cast<std::size_t>(k)] = law.tail[static_cast<std::size_t>(k - 1)] * law.u;
    }
    if (law.u == 1) {
        law.expected_len = horizon;
        law.expected_len_sq = Rational(horizon) * horizon;
    } else {
        const Rational one(1);
        Rational u_pow_T = law.tail[static_cast<std::size_t>(horizon)];
        law.expected_len = law.u * (one - u_pow_T) / (one - law.u);
        // E[L^2] = sum_{k=1..T} (2k - 1) Pr(L >= k)
        Rational acc(0);
        for (std::int64_t k = 1; k <= horizon; ++k) {
            acc += Rational(2 * k - 1) * law.tail[static_cast<std::size_t>(k)];
        }
        law.expected_len_sq = acc;
    }
    return law;
}

struct SuffixSample {
    std::vector<double> tail;  // empirical Pr(L >= k), k = 0..T
    double mean = 0.0;
    std::int64_t trials = 0;
};

// Monte Carlo draw of the suffix length: x_t ~ Unif[1, m-1], L = T - tau
// where tau is the index of the last non-unit (0 if none).
inline SuffixSample simulate_suffix(std::int64_t m, std::int64_t horizon, std::int64_t trials, Rng& rng) {
    if (trials < 1) throw ConfigError("simulate_suffix: need trials >= 1");
    if (m < 2 || horizon < 1) throw ConfigError("simulate_suffix: need m >= 2 and T >= 1");
    std::vector<std::int64_t> ge_count(static_cast<std::size_t>(horizon) + 1, 0);
    double sum = 0.0;
    for (std::int64_t t = 0; t < trials; ++t) {
        std::int64_t tau = 0;
        for (std::int64_t i = 1; i <= horizon; ++i) {
            const std::int64_t x = rng.uniform_int(1, m - 1);
            if (std::gcd(x, m) != 1) tau = i;
        }
        const std::int64_t len = horizon - tau;
        sum += static_cast<double>(len);
        for (std::int64_t k = 0; k <= len; ++k) ge_count[static_cast<std::size_t>(k)] += 1;
    }
    SuffixSample out;
    out.trials = trials;
    out.mean = sum / static_cast<double>(trials);
    out.tail.resize(ge_count.size());
    for (std::size_t k = 0; k < ge_count.size(); ++k) {
        out.tail[k] = static_cast<double>(ge_count[k]) / static_cast<double>(trials);
    }
    return out;
}

// Diagnostic: how often does resampling input x_i change the final state?
// Measures effective dependence of the label on position i.
inline double input_sensitivity(std::int64_t m, std::int64_t b, std::int64_t horizon, std::int64_t position,
                                std::int64_t trials, Rng& rng) {
    if (position < 1 || position > horizon) throw ConfigError("input_sensitivity: position out of [1, T]");
    if (m < 3) throw ConfigError("input_sensitivity: need m >= 3 to resample a distinct value");
    auto roll = [&](const std::vector<std::int64_t>& xs) {
        std::int64_t s = xs[0];
        for (std::size_t t = 1; t < xs.size(); ++t) s = (s * xs[t] + b) % m;
        return s;
    };
    std::int64_t changed = 0;
    std::vector<std::int64_t> xs(static_cast<std::size_t>(horizon));
    for (std::int64_t t = 0; t < trials; ++t) {
        for (auto& x : xs) x = rng.uniform_int(1, m - 1);
        const std::int64_t y = roll(xs);
        const std::int64_t old = xs[static_cast<std::size_t>(position - 1)];
        std::int64_t alt;
        do {
            alt = rng.uniform_int(1, m - 1);
        } while (alt == old);
        xs[static_cast<std::size_t>(position - 1)] = alt;
        if (roll(xs) != y) ++changed;
        xs[static_cast<std::size_t>(position - 1)] = old;
    }
    return static_cast<double>(changed) / static_cast<double>(trials);
}

}  // namespace latentlab::theory
