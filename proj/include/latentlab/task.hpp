#pragma once

// The modular polynomial-iteration task: sample inputs x_1..x_T, iterate
// s_1 = x_1, s_t = s_{t-1} * x_t + b (mod m), label y = s_T.

#include <cstdint>
#include <vector>

#include "latentlab/common.hpp"

namespace latentlab {

struct TaskSpec {
    std::int64_t modulus = 50;
    std::int64_t bias = 1;
    std::int64_t hops = 1;  // sequence has hops + 1 inputs
    std::int64_t input_low = 1;
    std::int64_t input_high = 49;  // defaults to modulus - 1 via validate()

    std::int64_t seq_len() const { return hops + 1; }

    void validate() const {
        if (modulus < 2) throw ConfigError("TaskSpec: modulus must be >= 2");
        if (bias < 0 || bias >= modulus) throw ConfigError("TaskSpec: bias must lie in [0, m)");
        if (hops < 1) throw ConfigError("TaskSpec: hops must be >= 1");
        if (input_low < 1 || input_low > input_high || input_high > modulus - 1)
            throw ConfigError("TaskSpec: need 1 <= input_low <= input_high <= m-1");
    }

    static TaskSpec make(std::int64_t m, std::int64_t b, std::int64_t hops) {
        TaskSpec s;
        s.modulus = m;
        s.bias = b;
        s.hops = hops;
        s.input_low = 1;
        s.input_high = m - 1;
        s.validate();
        return s;
    }
};

struct TaskInstance {
    TaskSpec spec;
    std::vector<std::int64_t> inputs;  // x_1..x_T, values in [input_low, input_high]
    std::vector<std::int64_t> states;  // s_1..s_T, values in [0, m)

    std::int64_t answer() const { return states.back(); }
    std::int64_t seq_len() const { return static_cast<std::int64_t>(inputs.size()); }
};

// Iterate the recurrence over a given input vector.
inline std::vector<std::int64_t> roll_states(const TaskSpec& spec, const std::vector<std::int64_t>& inputs) {
    std::vector<std::int64_t> states(inputs.size());
    states[0] = inputs[0] % spec.modulus;
    for (std::size_t t = 1; t < inputs.size(); ++t) {
        states[t] = (states[t - 1] * inputs[t] + spec.bias) % spec.modulus;
    }
    return states;
}

// Instance with the spec's full length (hops + 1 inputs).
inline TaskInstance generate_instance(const TaskSpec& spec, Rng& rng) {
    spec.validate();
    TaskInstance inst;
    inst.spec = spec;
    inst.inputs.resize(static_cast<std::size_t>(spec.seq_len()));
    for (auto& x : inst.inputs) x = rng.uniform_int(spec.input_low, spec.input_high);
    inst.states = roll_states(spec, inst.inputs);
    return inst;
}

// Instance truncated to `len` inputs (curriculum lengths 1..hops+1). The
// parent spec rides along unchanged; the instance's actual length is
// inputs.size().
inline TaskInstance generate_instance_len(const TaskSpec& spec, std::int64_t len, Rng& rng) {
    spec.validate();
    if (len < 1 || len > spec.seq_len()) throw ConfigError("generate_instance_len: length outside [1, hops+1]");
    TaskInstance inst;
    inst.spec = spec;
    inst.inputs.resize(static_cast<std::size_t>(len));
    for (auto& x : inst.inputs) x = rng.uniform_int(spec.input_low, spec.input_high);
    inst.states = roll_states(spec, inst.inputs);
    return inst;
}

// Unrolled form of the recurrence:
//   s_T = x_1 * prod_{i=2..T} x_i + b * sum_{t=2..T} prod_{i=t+1..T} x_i  (mod m),
// empty products equal to 1. Independent of roll_states on purpose: the two
// routes cross-check each other.
inline std::int64_t closed_form_answer(const TaskInstance& inst) {
    const std::int64_t m = inst.spec.modulus;
    const std::int64_t T = inst.seq_len();
    const auto& x = inst.inputs;
    std::int64_t lead = x[0] % m;
    for (std::int64_t i = 1; i < T; ++i) lead = (lead * x[static_cast<std::size_t>(i)]) % m;
    std::int64_t shift = 0;
    for (std::int64_t t = 2; t <= T; ++t) {
        std::int64_t prod = 1;
        for (std::int64_t i = t + 1; i <= T; ++i) prod = (prod * x[static_cast<std::size_t>(i - 1)]) % m;
        shift = (shift + prod) % m;
    }
    return (lead + inst.spec.bias % m * shift) % m;
}

// Counterfactual input for patching experiments: x~_i = (2 * x_i) mod m,
// position 1-indexed. The doubled value is used verbatim even when it falls
// outside the sampling bounds (it can be 0).
inline TaskInstance corrupt_input(const TaskInstance& inst, std::int64_t position) {
    if (position < 1 || position > inst.seq_len())
        throw ConfigError("corrupt_input: position outside [1, T]");
    TaskInstance out = inst;
    auto& x = out.inputs[static_cast<std::size_t>(position - 1)];
    x = (2 * x) % inst.spec.modulus;
    out.states = roll_states(out.spec, out.inputs);
    return out;
}

}  // namespace latentlab
