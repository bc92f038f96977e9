#pragma once

// Checkpoint format: "LLABCKPT" magic, a format version, the model config
// header, then every parameter as little-endian float32 in registry order.
// A JSON sidecar (same path + ".json") carries the config and training
// metadata for humans and tooling.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentlab/model.hpp"

namespace latentlab {

inline constexpr char kCkptMagic[8] = {'L', 'L', 'A', 'B', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCkptVersion = 1;

namespace detail {

inline void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::ifstream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ModelState<T>& model,
                     const nlohmann::ordered_json& metadata = {}) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kCkptMagic, 8);
    detail::put_u32(out, kCkptVersion);
    const auto& c = model.config;
    for (const int v : {c.layers, c.heads, c.d_model, c.context_length, c.vocab_size, c.latent_steps})
        detail::put_u32(out, static_cast<std::uint32_t>(v));
    detail::put_u32(out, static_cast<std::uint32_t>(model.flat.size()));
    std::vector<float> buf(model.flat.size());
    for (std::size_t i = 0; i < model.flat.size(); ++i) buf[i] = static_cast<float>(model.flat[i]);
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!out) throw IoError("checkpoint write failed: " + path);
    out.close();

    nlohmann::ordered_json side;
    side["format"] = "latentlab-checkpoint";
    side["version"] = kCkptVersion;
    side["code_version"] = std::string(kVersion);
    side["config"] = {{"layers", c.layers},       {"heads", c.heads},
                      {"d_model", c.d_model},     {"context_length", c.context_length},
                      {"vocab_size", c.vocab_size}, {"latent_steps", c.latent_steps}};
    side["params"] = model.flat.size();
    if (!metadata.is_null() && !metadata.empty()) side["meta"] = metadata;
    std::ofstream js(path + ".json");
    js << side.dump(2) << "\n";
}

template <class T>
ModelState<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw CheckpointError("bad checkpoint magic in " + path);
    const auto version = detail::get_u32(in);
    if (version != kCkptVersion)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    ModelConfig cfg;
    cfg.layers = static_cast<int>(detail::get_u32(in));
    cfg.heads = static_cast<int>(detail::get_u32(in));
    cfg.d_model = static_cast<int>(detail::get_u32(in));
    cfg.context_length = static_cast<int>(detail::get_u32(in));
    cfg.vocab_size = static_cast<int>(detail::get_u32(in));
    cfg.latent_steps = static_cast<int>(detail::get_u32(in));
    const auto count = detail::get_u32(in);
    cfg.validate();
    if (static_cast<std::int64_t>(count) != param_count(cfg))
        throw CheckpointError("checkpoint parameter count does not match its config header");
    ModelState<T> model;
    model.config = cfg;
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
    if (!in) throw CheckpointError("checkpoint truncated: " + path);
    model.flat.resize(count);
    for (std::size_t i = 0; i < buf.size(); ++i) model.flat[i] = static_cast<T>(buf[i]);
    return model;
}

}  // namespace latentlab
