#pragma once

// Curriculum construction: for a task with n hops, draw instances at every
// input length 1..n+1. Train/test membership is decided by hashing the input
// tuple with a fixed salt, so the two sides are disjoint token-for-token by
// construction and reproducible without storing indices.

#include <cstdint>
#include <map>
#include <vector>

#include "latentlab/serialize.hpp"
#include "latentlab/task.hpp"

namespace latentlab {

inline constexpr std::uint64_t kSplitSalt = 0x6c61746c61620a01ULL;
inline constexpr int kTestPercent = 10;  // hash buckets 0..9 of 100 are test

inline std::uint64_t input_tuple_hash(const std::vector<std::int64_t>& inputs) {
    std::uint64_t h = kSplitSalt;
    const std::uint64_t len = inputs.size();
    h = hash_combine_u64(h, len);
    for (const auto x : inputs) h = hash_combine_u64(h, static_cast<std::uint64_t>(x));
    return h;
}

inline bool is_test_tuple(const std::vector<std::int64_t>& inputs) {
    return input_tuple_hash(inputs) % 100 < kTestPercent;
}

struct LengthGroup {
    std::int64_t length = 0;
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> test;
};

struct Curriculum {
    TaskSpec spec;
    std::vector<LengthGroup> groups;  // one per length 1..hops+1

    std::size_t train_size() const {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.train.size();
        return n;
    }
    std::size_t test_size() const {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.test.size();
        return n;
    }
};

namespace detail {

// Enumerate the full tuple space when it is small enough; otherwise nullopt
// semantics via empty return plus `enumerated = false`.
inline bool enumerate_side(const TaskSpec& spec, std::int64_t len, bool test_side,
                           std::vector<std::vector<std::int64_t>>& out) {
    const std::int64_t span = spec.input_high - spec.input_low + 1;
    double space = 1.0;
    for (std::int64_t i = 0; i < len; ++i) {
        space *= static_cast<double>(span);
        if (space > 200000.0) return false;
    }
    std::vector<std::int64_t> tuple(static_cast<std::size_t>(len), spec.input_low);
    while (true) {
        if (is_test_tuple(tuple) == test_side) out.push_back(tuple);
        std::int64_t pos = len - 1;
        while (pos >= 0) {
            auto& v = tuple[static_cast<std::size_t>(pos)];
            if (++v <= spec.input_high) break;
            v = spec.input_low;
            --pos;
        }
        if (pos < 0) break;
    }
    return true;
}

inline std::vector<TaskInstance> sample_side(const TaskSpec& spec, std::int64_t len, std::int64_t count,
                                             bool test_side, Rng& rng) {
    std::vector<TaskInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    std::vector<std::vector<std::int64_t>> side_tuples;
    if (enumerate_side(spec, len, test_side, side_tuples)) {
        if (side_tuples.empty())
            throw ConfigError("curriculum: no " + std::string(test_side ? "test" : "train") +
                              " tuples exist at length " + std::to_string(len) +
                              "; the input space is too small for the hash split");
        for (std::int64_t i = 0; i < count; ++i) {
            const auto& tuple = side_tuples[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(side_tuples.size()) - 1))];
            TaskInstance inst;
            inst.spec = spec;
            inst.inputs = tuple;
            inst.states = roll_states(spec, tuple);
            out.push_back(std::move(inst));
        }
        return out;
    }
    // Large space: rejection sampling terminates quickly for either side.
    std::int64_t attempts = 0;
    const std::int64_t max_attempts = count * 1000 + 100000;
    while (static_cast<std::int64_t>(out.size()) < count) {
        if (++attempts > max_attempts)
            throw ConfigError("curriculum: rejection sampling stalled at length " + std::to_string(len));
        TaskInstance inst = generate_instance_len(spec, len, rng);
        if (is_test_tuple(inst.inputs) != test_side) continue;
        out.push_back(std::move(inst));
    }
    return out;
}

}  // namespace detail

// `per_length` training instances for every length 1..hops+1, plus
// `test_per_length` held-out instances per length when requested.
inline Curriculum make_curriculum(const TaskSpec& spec, std::int64_t per_length, Rng& rng,
                                  std::int64_t test_per_length = 0) {
    spec.validate();
    if (per_length < 1) throw ConfigError("make_curriculum: per_length must be >= 1");
    Curriculum cur;
    cur.spec = spec;
    for (std::int64_t len = 1; len <= spec.seq_len(); ++len) {
        LengthGroup g;
        g.length = len;
        g.train = detail::sample_side(spec, len, per_length, /*test_side=*/false, rng);
        if (test_per_length > 0)
            g.test = detail::sample_side(spec, len, test_per_length, /*test_side=*/true, rng);
        cur.groups.push_back(std::move(g));
    }
    return cur;
}

}  // namespace latentlab
