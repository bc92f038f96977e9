#pragma once

// Token vocabulary and position roles shared by every serialization regime.
// 50 value tokens (id == value) plus 5 structural tokens, independent of the
// task modulus so one embedding table serves the whole modulus sweep.

#include <cstdint>
#include <string>

#include "latentlab/common.hpp"

namespace latentlab {

struct Vocabulary {
    static constexpr int kNumValues = 50;
    static constexpr int kPad = kNumValues + 0;
    static constexpr int kEoi = kNumValues + 1;  // end of inputs
    static constexpr int kBot = kNumValues + 2;  // begin latent thought
    static constexpr int kEot = kNumValues + 3;  // end latent thought
    static constexpr int kAns = kNumValues + 4;  // pre-answer boundary
    static constexpr int kSize = kNumValues + 5;

    // Latent slots never read the embedding table; their serialized id is a
    // placeholder (PAD reused) and the role array marks them.
    static constexpr int kLatentPlaceholder = kPad;

    static int value_token(int v) {
        if (v < 0 || v >= kNumValues) throw ConfigError("value_token: value outside [0, 50)");
        return v;
    }
    static bool is_value(int id) { return id >= 0 && id < kNumValues; }

    static std::string token_name(int id) {
        if (is_value(id)) return std::to_string(id);
        switch (id) {
            case kPad: return "PAD";
            case kEoi: return "EOI";
            case kBot: return "BOT";
            case kEot: return "EOT";
            case kAns: return "ANS";
            default: return "?";
        }
    }
};

// What a position is, independent of its token id.
enum class Role : std::uint8_t {
    Input,         // x_i
    Eoi,           // separator after inputs (teacher)
    Trace,         // emitted intermediate state s_t (teacher)
    Bot,           // begin-of-thought marker (student)
    Latent,        // latent thought slot (student)
    Eot,           // end-of-thought marker (student)
    Ans,           // pre-answer boundary; answer is predicted here
    AnswerTarget,  // the answer token itself (teacher only)
    Pad,
};

inline const char* role_name(Role r) {
    switch (r) {
        case Role::Input: return "Input";
        case Role::Eoi: return "EOI";
        case Role::Trace: return "Trace";
        case Role::Bot: return "BOT";
        case Role::Latent: return "Latent";
        case Role::Eot: return "EOT";
        case Role::Ans: return "ANS";
        case Role::AnswerTarget: return "AnswerTarget";
        case Role::Pad: return "PAD";
    }
    return "?";
}

inline Role role_from_name(const std::string& s) {
    if (s == "Input") return Role::Input;
    if (s == "EOI") return Role::Eoi;
    if (s == "Trace") return Role::Trace;
    if (s == "BOT") return Role::Bot;
    if (s == "Latent") return Role::Latent;
    if (s == "EOT") return Role::Eot;
    if (s == "ANS") return Role::Ans;
    if (s == "AnswerTarget") return Role::AnswerTarget;
    if (s == "PAD") return Role::Pad;
    throw ConfigError("unknown role name: " + s);
}

}  // namespace latentlab
