#pragma once

// Turns task instances into token sequences for the three training regimes.
//
// Layouts for a length-T instance (T inputs, states s_1..s_T, answer s_T):
//   Teacher: x_1 .. x_T  EOI  s_1 .. s_{T-1}  ANS  s_T
//   Student: x_1 .. x_T  BOT  l_1 .. l_p  EOT  ANS
//   NonCoT:  x_1 .. x_T  ANS
//
// loss_mask[i] == true means the next-token prediction made AT position i is
// supervised. Its target is token_ids[i+1] when i+1 exists, otherwise the
// `answer` field (Student/NonCoT end at ANS with no answer token emitted).
// Teacher supervision therefore covers exactly the trace tokens plus the
// final answer; Student and NonCoT supervise only the ANS-position
// prediction.

#include <cstdint>
#include <string>
#include <vector>

#include "latentlab/task.hpp"
#include "latentlab/vocab.hpp"

namespace latentlab {

enum class Regime : std::uint8_t { Teacher, Student, NonCoT };

inline const char* regime_name(Regime r) {
    switch (r) {
        case Regime::Teacher: return "Teacher";
        case Regime::Student: return "Student";
        case Regime::NonCoT: return "NonCoT";
    }
    return "?";
}

inline Regime regime_from_name(const std::string& s) {
    if (s == "Teacher") return Regime::Teacher;
    if (s == "Student") return Regime::Student;
    if (s == "NonCoT") return Regime::NonCoT;
    throw ConfigError("unknown regime: " + s);
}

struct SerializedExample {
    std::vector<int> token_ids;
    std::vector<Role> roles;
    std::vector<bool> loss_mask;
    std::int64_t answer = 0;
    Regime regime = Regime::Teacher;

    int length() const { return static_cast<int>(token_ids.size()); }

    int ans_pos() const {
        for (int i = length() - 1; i >= 0; --i)
            if (roles[static_cast<std::size_t>(i)] == Role::Ans) return i;
        throw ConfigError("SerializedExample: no ANS position");
    }

    // Supervision target for a masked position (see header comment).
    int target_at(int pos) const {
        if (pos + 1 < length() && roles[static_cast<std::size_t>(pos + 1)] != Role::Pad)
            return token_ids[static_cast<std::size_t>(pos + 1)];
        return static_cast<int>(answer);
    }

    std::vector<int> latent_positions() const {
        std::vector<int> out;
        for (int i = 0; i < length(); ++i)
            if (roles[static_cast<std::size_t>(i)] == Role::Latent) out.push_back(i);
        return out;
    }

    // Right-pad in place to `len` tokens. PAD positions are excluded from
    // attention and never supervised.
    void pad_to(int len) {
        if (len < length()) throw ConfigError("pad_to: target shorter than sequence");
        token_ids.resize(static_cast<std::size_t>(len), Vocabulary::kPad);
        roles.resize(static_cast<std::size_t>(len), Role::Pad);
        loss_mask.resize(static_cast<std::size_t>(len), false);
    }
};

inline SerializedExample serialize(const TaskInstance& inst, Regime regime, int latent_steps = 6,
                                   int context_length = 0) {
    const auto T = static_cast<std::size_t>(inst.seq_len());
    SerializedExample ex;
    ex.regime = regime;
    ex.answer = inst.answer();

    auto push = [&ex](int id, Role role, bool mask) {
        ex.token_ids.push_back(id);
        ex.roles.push_back(role);
        ex.loss_mask.push_back(mask);
    };

    switch (regime) {
        case Regime::Teacher: {
            for (std::size_t i = 0; i < T; ++i)
                push(Vocabulary::value_token(static_cast<int>(inst.inputs[i])), Role::Input, false);
            // EOI opens the trace; its prediction is the first trace token
            // when one exists. The prediction that emits the ANS boundary is
            // not supervised (rollout forces ANS after T-1 trace steps).
            push(Vocabulary::kEoi, Role::Eoi, T > 1);
            for (std::size_t t = 0; t + 1 < T; ++t) {
                const bool predicts_trace = t + 2 < T;  // last trace position predicts ANS
                push(Vocabulary::value_token(static_cast<int>(inst.states[t])), Role::Trace, predicts_trace);
            }
            push(Vocabulary::kAns, Role::Ans, true);
            push(Vocabulary::value_token(static_cast<int>(ex.answer)), Role::AnswerTarget, false);
            break;
        }
        case Regime::Student: {
            if (latent_steps < 1) throw ConfigError("serialize: Student regime needs latent_steps >= 1");
            for (std::size_t i = 0; i < T; ++i)
                push(Vocabulary::value_token(static_cast<int>(inst.inputs[i])), Role::Input, false);
            push(Vocabulary::kBot, Role::Bot, false);
            for (int j = 0; j < latent_steps; ++j) push(Vocabulary::kLatentPlaceholder, Role::Latent, false);
            push(Vocabulary::kEot, Role::Eot, false);
            push(Vocabulary::kAns, Role::Ans, true);
            break;
        }
        case Regime::NonCoT: {
            for (std::size_t i = 0; i < T; ++i)
                push(Vocabulary::value_token(static_cast<int>(inst.inputs[i])), Role::Input, false);
            push(Vocabulary::kAns, Role::Ans, true);
            break;
        }
    }

    if (context_length > 0 && ex.length() > context_length)
        throw ConfigError("serialize: sequence of " + std::to_string(ex.length()) +
                          " tokens exceeds context length " + std::to_string(context_length));
    return ex;
}

// Recover the integers behind the value tokens (inputs, then any trace).
inline std::vector<std::int64_t> decode_values(const SerializedExample& ex) {
    std::vector<std::int64_t> out;
    for (int i = 0; i < ex.length(); ++i) {
        const auto role = ex.roles[static_cast<std::size_t>(i)];
        if (role == Role::Input || role == Role::Trace || role == Role::AnswerTarget)
            out.push_back(ex.token_ids[static_cast<std::size_t>(i)]);
    }
    return out;
}

}  // namespace latentlab
