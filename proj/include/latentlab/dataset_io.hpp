#pragma once

// JSONL dataset export/import: one serialized example per line with fields
// token_ids, roles, loss_mask, answer, regime, spec.

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentlab/curriculum.hpp"
#include "latentlab/serialize.hpp"

namespace latentlab {

inline nlohmann::ordered_json example_to_json(const SerializedExample& ex, const TaskSpec& spec) {
    nlohmann::ordered_json j;
    j["token_ids"] = ex.token_ids;
    std::vector<std::string> roles;
    roles.reserve(ex.roles.size());
    for (auto r : ex.roles) roles.emplace_back(role_name(r));
    j["roles"] = roles;
    std::vector<int> mask(ex.loss_mask.begin(), ex.loss_mask.end());
    j["loss_mask"] = mask;
    j["answer"] = ex.answer;
    j["regime"] = regime_name(ex.regime);
    j["spec"] = {{"m", spec.modulus}, {"b", spec.bias}, {"hops", spec.hops},
                 {"input_low", spec.input_low}, {"input_high", spec.input_high}};
    return j;
}

inline SerializedExample example_from_json(const nlohmann::json& j) {
    SerializedExample ex;
    ex.token_ids = j.at("token_ids").get<std::vector<int>>();
    for (const auto& r : j.at("roles")) ex.roles.push_back(role_from_name(r.get<std::string>()));
    for (const auto& v : j.at("loss_mask")) ex.loss_mask.push_back(v.get<int>() != 0);
    ex.answer = j.at("answer").get<std::int64_t>();
    ex.regime = regime_from_name(j.at("regime").get<std::string>());
    if (ex.roles.size() != ex.token_ids.size() || ex.loss_mask.size() != ex.token_ids.size())
        throw IoError("dataset line: parallel arrays have mismatched lengths");
    return ex;
}

inline void write_jsonl(const std::string& path, const Curriculum& cur, Regime regime, int latent_steps,
                        bool test_split = false) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& g : cur.groups) {
        const auto& side = test_split ? g.test : g.train;
        for (const auto& inst : side) {
            out << example_to_json(serialize(inst, regime, latent_steps), cur.spec).dump() << "\n";
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<SerializedExample> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset: " + path);
    std::vector<SerializedExample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(example_from_json(nlohmann::json::parse(line)));
    }
    return out;
}

}  // namespace latentlab
