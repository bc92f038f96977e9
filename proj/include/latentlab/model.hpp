#pragma once

// Decoder-only pre-norm transformer parameters in one flat buffer with a
// named tensor registry. The flat layout is what the optimizer, gradient
// clipping, finite-difference checks, and the checkpoint format all iterate
// over, in registry order.

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "latentlab/common.hpp"
#include "latentlab/vocab.hpp"

namespace latentlab {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
    int layers = 3;
    int heads = 2;
    int d_model = 256;
    int context_length = 64;
    int vocab_size = Vocabulary::kSize;
    int latent_steps = 6;

    int head_dim() const { return d_model / heads; }
    int mlp_dim() const { return 4 * d_model; }

    void validate() const {
        if (layers < 1 || heads < 1 || d_model < 1) throw ConfigError("ModelConfig: nonpositive dimension");
        if (d_model % heads != 0) throw ConfigError("ModelConfig: d_model must be divisible by heads");
        if (context_length < 4) throw ConfigError("ModelConfig: context_length too small");
        if (vocab_size < 2) throw ConfigError("ModelConfig: vocab_size too small");
        if (latent_steps < 1) throw ConfigError("ModelConfig: latent_steps must be >= 1");
    }

    bool operator==(const ModelConfig&) const = default;
};

struct TensorSpec {
    std::string name;
    std::int64_t rows = 0;
    std::int64_t cols = 0;  // 1 for vectors
    std::int64_t offset = 0;
    bool decay = false;  // participates in decoupled weight decay

    std::int64_t size() const { return rows * cols; }
};

// Registry order defines the on-disk parameter order. Embeddings first, then
// per-layer blocks, then final norm, unembedding, and the latent projection.
inline std::vector<TensorSpec> param_layout(const ModelConfig& cfg) {
    cfg.validate();
    std::vector<TensorSpec> specs;
    std::int64_t off = 0;
    auto add = [&](const std::string& name, std::int64_t r, std::int64_t c, bool decay) {
        specs.push_back({name, r, c, off, decay});
        off += r * c;
    };
    const std::int64_t d = cfg.d_model, h = cfg.mlp_dim(), v = cfg.vocab_size;
    add("tok_emb", v, d, false);
    add("pos_emb", cfg.context_length, d, false);
    for (int l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1_g", d, 1, false);
        add(p + "ln1_b", d, 1, false);
        add(p + "wq", d, d, true);
        add(p + "bq", d, 1, false);
        add(p + "wk", d, d, true);
        add(p + "bk", d, 1, false);
        add(p + "wv", d, d, true);
        add(p + "bv", d, 1, false);
        add(p + "wo", d, d, true);
        add(p + "bo", d, 1, false);
        add(p + "ln2_g", d, 1, false);
        add(p + "ln2_b", d, 1, false);
        add(p + "w1", d, h, true);
        add(p + "b1", h, 1, false);
        add(p + "w2", h, d, true);
        add(p + "b2", d, 1, false);
    }
    add("lnf_g", d, 1, false);
    add("lnf_b", d, 1, false);
    add("unemb", d, v, true);  // stored as d x V; logits = LN(h) * unemb + b_u
    add("b_u", v, 1, false);
    add("proj_w", d, d, true);  // latent projection: affine map + layer norm
    add("proj_b", d, 1, false);
    add("proj_ln_g", d, 1, false);
    add("proj_ln_b", d, 1, false);
    return specs;
}

inline std::int64_t param_count(const ModelConfig& cfg) {
    const auto specs = param_layout(cfg);
    return specs.back().offset + specs.back().size();
}

// Named views over a flat buffer (parameters or gradients share the layout).
template <class T, bool Const>
struct ParamViewsImpl {
    using Ptr = std::conditional_t<Const, const T*, T*>;
    using Map = std::conditional_t<Const, Eigen::Map<const Mat<T>>, Eigen::Map<Mat<T>>>;

    const ModelConfig* cfg = nullptr;
    Ptr base = nullptr;

    Map view(std::int64_t offset, std::int64_t r, std::int64_t c) const {
        return Map(base + offset, r, c);
    }

    // Offsets are recomputed arithmetically; must mirror param_layout().
    std::int64_t d() const { return cfg->d_model; }
    std::int64_t hdim() const { return cfg->mlp_dim(); }
    std::int64_t layer_block() const { return 2 * d() + 4 * (d() * d() + d()) + 2 * d() + d() * hdim() + hdim() + hdim() * d() + d(); }
    std::int64_t layers_base() const { return cfg->vocab_size * d() + cfg->context_length * d(); }
    std::int64_t tail_base() const { return layers_base() + cfg->layers * layer_block(); }

    Map tok_emb() const { return view(0, cfg->vocab_size, d()); }
    Map pos_emb() const { return view(cfg->vocab_size * d(), cfg->context_length, d()); }

    struct LayerViews {
        Map ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
    };

    LayerViews layer(int l) const {
        std::int64_t o = layers_base() + l * layer_block();
        const std::int64_t dd = d(), hh = hdim();
        auto next = [&](std::int64_t r, std::int64_t c) {
            auto m = view(o, r, c);
            o += r * c;
            return m;
        };
        return LayerViews{next(dd, 1), next(dd, 1), next(dd, dd), next(dd, 1), next(dd, dd), next(dd, 1),
                          next(dd, dd), next(dd, 1), next(dd, dd), next(dd, 1), next(dd, 1), next(dd, 1),
                          next(dd, hh), next(hh, 1), next(hh, dd), next(dd, 1)};
    }

    std::int64_t unemb_off() const { return tail_base() + 2 * d(); }
    std::int64_t proj_off() const { return unemb_off() + d() * cfg->vocab_size + cfg->vocab_size; }

    Map lnf_g() const { return view(tail_base(), d(), 1); }
    Map lnf_b() const { return view(tail_base() + d(), d(), 1); }
    Map unemb() const { return view(unemb_off(), d(), cfg->vocab_size); }
    Map b_u() const { return view(unemb_off() + d() * cfg->vocab_size, cfg->vocab_size, 1); }
    Map proj_w() const { return view(proj_off(), d(), d()); }
    Map proj_b() const { return view(proj_off() + d() * d(), d(), 1); }
    Map proj_ln_g() const { return view(proj_off() + d() * d() + d(), d(), 1); }
    Map proj_ln_b() const { return view(proj_off() + d() * d() + 2 * d(), d(), 1); }
};

template <class T>
using ParamViews = ParamViewsImpl<T, false>;
template <class T>
using ConstParamViews = ParamViewsImpl<T, true>;

template <class T>
struct ModelState {
    ModelConfig config;
    std::vector<T> flat;

    ParamViews<T> views() { return {&config, flat.data()}; }
    ConstParamViews<T> views() const { return {&config, flat.data()}; }

    std::int64_t size() const { return static_cast<std::int64_t>(flat.size()); }

    bool all_finite() const {
        for (const auto v : flat)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    template <class U>
    ModelState<U> cast() const {
        ModelState<U> out;
        out.config = config;
        out.flat.resize(flat.size());
        for (std::size_t i = 0; i < flat.size(); ++i) out.flat[i] = static_cast<U>(flat[i]);
        return out;
    }
};

// Weight matrices ~ N(0, 0.02^2); biases and norm shifts zero; norm scales
// one. Deterministic for a given seed.
template <class T>
ModelState<T> init_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ModelState<T> model;
    model.config = cfg;
    model.flat.assign(static_cast<std::size_t>(param_count(cfg)), T(0));
    const auto specs = param_layout(cfg);
    for (const auto& s : specs) {
        T* p = model.flat.data() + s.offset;
        const bool is_scale = s.name.find("ln1_g") != std::string::npos ||
                              s.name.find("ln2_g") != std::string::npos || s.name == "lnf_g" ||
                              s.name == "proj_ln_g";
        const bool is_matrix = s.cols > 1;
        if (is_scale) {
            for (std::int64_t i = 0; i < s.size(); ++i) p[i] = T(1);
        } else if (is_matrix) {
            for (std::int64_t i = 0; i < s.size(); ++i) p[i] = static_cast<T>(0.02 * rng.normal());
        }  // vectors (biases, shifts) stay zero
    }
    return model;
}

}  // namespace latentlab
