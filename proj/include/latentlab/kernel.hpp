#pragma once

// Batched forward/backward for the pre-norm decoder transformer, including
// the latent-feedback mode used by the student: positions with role Latent
// take no token embedding; instead the final-layer residual of the previous
// position is passed through the latent projection (affine + layer norm) and
// injected, computed strictly left to right.
//
// Sequences are processed in phases: the regular prefix in one pass, each
// latent column in its own pass (its input depends on the previous column's
// top residual), then the regular suffix. The backward walks phases in
// reverse, accumulating attention key/value gradients and injection
// gradients in arena-wide buffers until the owning column is reached.
//
// Residual depths are numbered 0..L: depth 0 is the embedding stream
// entering layer 1, depth l is the stream after layer l. Activation patches
// overwrite a (depth, position) row the moment it is produced, so everything
// downstream (attention, later layers, latent feedback) is recomputed from
// the patched value.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <vector>

#include "latentlab/model.hpp"
#include "latentlab/nn_ops.hpp"
#include "latentlab/serialize.hpp"

namespace latentlab {

template <class T>
struct Patch {
    int depth = 0;  // 0 = pre-layer-1 stream, l = after layer l
    int pos = 0;
    RowVec<T> value;
};

template <class T>
using PatchList = std::vector<Patch<T>>;

enum class LogitMode { LossRowsOnly, AllRows, None };

template <class T>
struct BatchCache {
    ModelConfig cfg;
    int B = 0;
    int rows = 0;
    int latent_steps = 0;  // 0 in plain mode
    std::vector<const SerializedExample*> ex;
    std::vector<int> len, row0, prefix_len, ans_row;

    std::vector<Mat<T>> x;  // depth 0..L residual streams, rows x d

    struct Layer {
        Mat<T> a, q, k, v, ctx, m, g, u1, ug;
        Vec<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
        std::vector<Mat<T>> att;  // B*H matrices, len_e x len_e, causal rows
    };
    std::vector<Layer> layers;

    // Latent injection intermediates (rows used only at latent positions).
    Mat<T> aff;
    Vec<T> inj_mean, inj_rstd;

    // Supervised rows (packed) and their softmax state for the CE backward.
    std::vector<int> loss_rows;
    std::vector<int> loss_targets;
    Mat<T> loss_lnf;  // LNf outputs at loss rows
    Vec<T> loss_lnf_mean, loss_lnf_rstd;
    Mat<T> loss_probs;
    double loss_weight = 0.0;  // common CE row weight set by the loss assembly

    // Full logits on demand (analysis only).
    Mat<T> full_logits;
    Mat<T> full_lnf;

    // Distillation gradients injected during backward: per depth 1..L a list
    // of (arena row, gradient).
    std::vector<std::vector<std::pair<int, RowVec<T>>>> distill_grads;

    int arow(int e, int pos) const { return row0[static_cast<std::size_t>(e)] + pos; }
};

namespace detail {

// Packed view of one processing phase: an arena row list plus (example,
// position) bookkeeping.
struct Segment {
    std::vector<int> rows;  // arena rows, example-major
    std::vector<int> exi;   // owning example
    std::vector<int> pos;   // position within the example
    int count() const { return static_cast<int>(rows.size()); }
    bool empty() const { return rows.empty(); }
};

template <class T>
Mat<T> gather_rows(const Mat<T>& src, const std::vector<int>& rows) {
    Mat<T> out(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = src.row(rows[i]);
    return out;
}

template <class T>
void scatter_rows(const Mat<T>& src, const std::vector<int>& rows, Mat<T>& dst) {
    for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) = src.row(static_cast<Eigen::Index>(i));
}

template <class T>
void scatter_add_rows(const Mat<T>& src, const std::vector<int>& rows, Mat<T>& dst) {
    for (std::size_t i = 0; i < rows.size(); ++i) dst.row(rows[i]) += src.row(static_cast<Eigen::Index>(i));
}

template <class T>
void scatter_vec(const Vec<T>& src, const std::vector<int>& rows, Vec<T>& dst) {
    for (std::size_t i = 0; i < rows.size(); ++i) dst(rows[i]) = src(static_cast<Eigen::Index>(i));
}

template <class T>
Vec<T> gather_vec(const Vec<T>& src, const std::vector<int>& rows) {
    Vec<T> out(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = src(rows[i]);
    return out;
}

}  // namespace detail

// ----------------------------- batch assembly -----------------------------

// All examples in one batch must share the latent structure: either none of
// them has latent positions (plain mode) or all carry the same count placed
// between BOT and EOT.
template <class T>
BatchCache<T> make_batch_cache(const ModelConfig& cfg, const std::vector<const SerializedExample*>& examples) {
    if (examples.empty()) throw ConfigError("make_batch_cache: empty batch");
    BatchCache<T> c;
    c.cfg = cfg;
    c.B = static_cast<int>(examples.size());
    c.ex = examples;
    c.len.resize(examples.size());
    c.row0.resize(examples.size());
    c.prefix_len.resize(examples.size());
    c.ans_row.resize(examples.size());
    int rows = 0;
    int latent_count = -1;
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& ex = *examples[e];
        int real_len = ex.length();
        while (real_len > 0 && ex.roles[static_cast<std::size_t>(real_len - 1)] == Role::Pad) --real_len;
        if (real_len == 0) throw ConfigError("make_batch_cache: all-PAD example");
        if (real_len > cfg.context_length)
            throw ConfigError("make_batch_cache: sequence of " + std::to_string(real_len) +
                              " tokens overflows context " + std::to_string(cfg.context_length));
        for (int i = 0; i < real_len; ++i) {
            const int id = ex.token_ids[static_cast<std::size_t>(i)];
            if (id < 0 || id >= cfg.vocab_size)
                throw ConfigError("make_batch_cache: unknown token id " + std::to_string(id));
        }
        const auto latents = ex.latent_positions();
        const int lc = static_cast<int>(latents.size());
        if (latent_count == -1) latent_count = lc;
        if (lc != latent_count) throw ConfigError("make_batch_cache: mixed latent layouts in one batch");
        for (std::size_t j = 1; j < latents.size(); ++j)
            if (latents[j] != latents[j - 1] + 1) throw ConfigError("make_batch_cache: latent slots not contiguous");
        c.len[e] = real_len;
        c.row0[e] = rows;
        c.prefix_len[e] = lc > 0 ? latents.front() : real_len;
        rows += real_len;
        int ans = -1;
        for (int i = 0; i < real_len; ++i)
            if (ex.roles[static_cast<std::size_t>(i)] == Role::Ans) ans = i;
        c.ans_row[e] = ans >= 0 ? c.row0[e] + ans : -1;
    }
    c.rows = rows;
    c.latent_steps = latent_count;
    const int L = cfg.layers, d = cfg.d_model, h = cfg.mlp_dim(), H = cfg.heads;
    c.x.resize(static_cast<std::size_t>(L) + 1);
    for (auto& m : c.x) m.resize(rows, d);
    c.layers.resize(static_cast<std::size_t>(L));
    for (auto& lay : c.layers) {
        lay.a.resize(rows, d);
        lay.q.resize(rows, d);
        lay.k.resize(rows, d);
        lay.v.resize(rows, d);
        lay.ctx.resize(rows, d);
        lay.m.resize(rows, d);
        lay.g.resize(rows, d);
        lay.u1.resize(rows, h);
        lay.ug.resize(rows, h);
        lay.ln1_mean.resize(rows);
        lay.ln1_rstd.resize(rows);
        lay.ln2_mean.resize(rows);
        lay.ln2_rstd.resize(rows);
        lay.att.resize(static_cast<std::size_t>(c.B) * H);
        for (int e = 0; e < c.B; ++e)
            for (int hh = 0; hh < H; ++hh)
                lay.att[static_cast<std::size_t>(e) * H + hh].setZero(c.len[static_cast<std::size_t>(e)],
                                                                      c.len[static_cast<std::size_t>(e)]);
    }
    if (latent_count > 0) {
        c.aff.resize(rows, d);
        c.inj_mean.resize(rows);
        c.inj_rstd.resize(rows);
    }
    c.distill_grads.assign(static_cast<std::size_t>(L) + 1, {});
    return c;
}

// ----------------------------- forward -----------------------------

namespace detail {

template <class T>
void apply_patches(BatchCache<T>& c, const std::vector<PatchList<T>>* patches, int depth, const Segment& seg) {
    if (!patches) return;
    for (int i = 0; i < seg.count(); ++i) {
        const int e = seg.exi[static_cast<std::size_t>(i)];
        for (const auto& p : (*patches)[static_cast<std::size_t>(e)]) {
            if (p.depth == depth && p.pos == seg.pos[static_cast<std::size_t>(i)]) {
                c.x[static_cast<std::size_t>(depth)].row(seg.rows[static_cast<std::size_t>(i)]) =
                    p.value.template cast<T>();
            }
        }
    }
}

// One transformer layer over a packed segment. Keys/values for all positions
// up to each query are read from the arena, so earlier phases must already
// be complete.
template <class T>
void layer_forward_segment(const ModelState<T>& model, BatchCache<T>& c, int l, const Segment& seg) {
    const auto views = model.views();
    const auto lay = views.layer(l);
    auto& acts = c.layers[static_cast<std::size_t>(l)];
    const int d = c.cfg.d_model, H = c.cfg.heads, dh = c.cfg.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    const Mat<T> xin = detail::gather_rows(c.x[static_cast<std::size_t>(l)], seg.rows);
    Mat<T> a(xin.rows(), d);
    Vec<T> mean(xin.rows()), rstd(xin.rows());
    layernorm_rows<T>(xin, lay.ln1_g, lay.ln1_b, a, mean, rstd);
    detail::scatter_vec(mean, seg.rows, acts.ln1_mean);
    detail::scatter_vec(rstd, seg.rows, acts.ln1_rstd);
    detail::scatter_rows(a, seg.rows, acts.a);

    Mat<T> q(xin.rows(), d), k(xin.rows(), d), v(xin.rows(), d);
    q.noalias() = a * lay.wq;
    q.rowwise() += lay.bq.col(0).transpose();
    k.noalias() = a * lay.wk;
    k.rowwise() += lay.bk.col(0).transpose();
    v.noalias() = a * lay.wv;
    v.rowwise() += lay.bv.col(0).transpose();
    detail::scatter_rows(q, seg.rows, acts.q);
    detail::scatter_rows(k, seg.rows, acts.k);
    detail::scatter_rows(v, seg.rows, acts.v);

    // Causal attention; keys are the example's arena rows [0, t].
    Mat<T> ctx(xin.rows(), d);
    for (int i = 0; i < seg.count(); ++i) {
        const int e = seg.exi[static_cast<std::size_t>(i)];
        const int t = seg.pos[static_cast<std::size_t>(i)];
        const int base = c.row0[static_cast<std::size_t>(e)];
        for (int h = 0; h < H; ++h) {
            auto kblk = acts.k.block(base, h * dh, t + 1, dh);
            auto vblk = acts.v.block(base, h * dh, t + 1, dh);
            auto qrow = q.row(static_cast<Eigen::Index>(i)).segment(h * dh, dh);
            Vec<T> scores = (kblk * qrow.transpose()) * scale;
            softmax_inplace(scores);
            auto& att = acts.att[static_cast<std::size_t>(e) * H + h];
            att.row(t).head(t + 1) = scores.transpose();
            ctx.row(static_cast<Eigen::Index>(i)).segment(h * dh, dh).noalias() = scores.transpose() * vblk;
        }
    }
    detail::scatter_rows(ctx, seg.rows, acts.ctx);

    Mat<T> m = xin;
    m.noalias() += ctx * lay.wo;
    m.rowwise() += lay.bo.col(0).transpose();
    detail::scatter_rows(m, seg.rows, acts.m);

    Mat<T> g(xin.rows(), d);
    layernorm_rows<T>(m, lay.ln2_g, lay.ln2_b, g, mean, rstd);
    detail::scatter_vec(mean, seg.rows, acts.ln2_mean);
    detail::scatter_vec(rstd, seg.rows, acts.ln2_rstd);
    detail::scatter_rows(g, seg.rows, acts.g);

    Mat<T> u1(xin.rows(), c.cfg.mlp_dim());
    u1.noalias() = g * lay.w1;
    u1.rowwise() += lay.b1.col(0).transpose();
    detail::scatter_rows(u1, seg.rows, acts.u1);
    Mat<T> ug = u1.unaryExpr([](T x) { return gelu(x); });
    detail::scatter_rows(ug, seg.rows, acts.ug);

    Mat<T> xout = m;
    xout.noalias() += ug * lay.w2;
    xout.rowwise() += lay.b2.col(0).transpose();
    detail::scatter_rows(xout, seg.rows, c.x[static_cast<std::size_t>(l) + 1]);
}

// Embed a segment at depth 0: token + positional embeddings for regular
// rows, latent injection for latent rows.
template <class T>
void embed_segment(const ModelState<T>& model, BatchCache<T>& c, const Segment& seg, bool latent_phase) {
    const auto views = model.views();
    const auto tok = views.tok_emb();
    const auto pos_emb = views.pos_emb();
    const int d = c.cfg.d_model;
    const int L = c.cfg.layers;
    if (!latent_phase) {
        for (int i = 0; i < seg.count(); ++i) {
            const int e = seg.exi[static_cast<std::size_t>(i)];
            const int t = seg.pos[static_cast<std::size_t>(i)];
            const int id = c.ex[static_cast<std::size_t>(e)]->token_ids[static_cast<std::size_t>(t)];
            c.x[0].row(seg.rows[static_cast<std::size_t>(i)]) = tok.row(id) + pos_emb.row(t);
        }
        return;
    }
    // Latent rows: inject LNproj(prev_top * W + b) + positional embedding.
    Mat<T> prev(seg.count(), d);
    for (int i = 0; i < seg.count(); ++i)
        prev.row(static_cast<Eigen::Index>(i)) =
            c.x[static_cast<std::size_t>(L)].row(seg.rows[static_cast<std::size_t>(i)] - 1);
    Mat<T> aff(seg.count(), d);
    aff.noalias() = prev * views.proj_w();
    aff.rowwise() += views.proj_b().col(0).transpose();
    detail::scatter_rows(aff, seg.rows, c.aff);
    Mat<T> inj(seg.count(), d);
    Vec<T> mean(seg.count()), rstd(seg.count());
    layernorm_rows<T>(aff, views.proj_ln_g(), views.proj_ln_b(), inj, mean, rstd);
    detail::scatter_vec(mean, seg.rows, c.inj_mean);
    detail::scatter_vec(rstd, seg.rows, c.inj_rstd);
    for (int i = 0; i < seg.count(); ++i) {
        const int t = seg.pos[static_cast<std::size_t>(i)];
        c.x[0].row(seg.rows[static_cast<std::size_t>(i)]) = inj.row(static_cast<Eigen::Index>(i)) + pos_emb.row(t);
    }
}

template <class T>
std::vector<Segment> plan_segments(const BatchCache<T>& c) {
    std::vector<Segment> phases;
    Segment prefix;
    for (int e = 0; e < c.B; ++e)
        for (int t = 0; t < c.prefix_len[static_cast<std::size_t>(e)]; ++t) {
            prefix.rows.push_back(c.arow(e, t));
            prefix.exi.push_back(e);
            prefix.pos.push_back(t);
        }
    phases.push_back(std::move(prefix));
    for (int j = 0; j < c.latent_steps; ++j) {
        Segment col;
        for (int e = 0; e < c.B; ++e) {
            const int t = c.prefix_len[static_cast<std::size_t>(e)] + j;
            col.rows.push_back(c.arow(e, t));
            col.exi.push_back(e);
            col.pos.push_back(t);
        }
        phases.push_back(std::move(col));
    }
    if (c.latent_steps > 0) {
        Segment suffix;
        for (int e = 0; e < c.B; ++e)
            for (int t = c.prefix_len[static_cast<std::size_t>(e)] + c.latent_steps;
                 t < c.len[static_cast<std::size_t>(e)]; ++t) {
                suffix.rows.push_back(c.arow(e, t));
                suffix.exi.push_back(e);
                suffix.pos.push_back(t);
            }
        if (!suffix.empty()) phases.push_back(std::move(suffix));
    }
    return phases;
}

}  // namespace detail

// Lens readout shared by training logits, evaluation, and the logit-lens
// analysis: logits = LNf(h) * unemb + b_u.
template <class T>
void lens_logits_rows(const ModelState<T>& model, const Mat<T>& h, Mat<T>& lnf_out, Vec<T>& mean, Vec<T>& rstd,
                      Mat<T>& logits) {
    const auto views = model.views();
    lnf_out.resize(h.rows(), h.cols());
    mean.resize(h.rows());
    rstd.resize(h.rows());
    layernorm_rows<T>(h, views.lnf_g(), views.lnf_b(), lnf_out, mean, rstd);
    logits.resize(h.rows(), model.config.vocab_size);
    logits.noalias() = lnf_out * views.unemb();
    logits.rowwise() += views.b_u().col(0).transpose();
}

// Forward over a prepared batch cache. Latent phases are triggered by the
// cache layout itself.
template <class T>
void forward_batch(const ModelState<T>& model, BatchCache<T>& c, LogitMode logit_mode,
                   const std::vector<PatchList<T>>* patches = nullptr) {
    const int L = model.config.layers;
    const auto phases = detail::plan_segments(c);
    for (std::size_t p = 0; p < phases.size(); ++p) {
        const auto& seg = phases[p];
        const bool latent_phase = c.latent_steps > 0 && p >= 1 && p <= static_cast<std::size_t>(c.latent_steps);
        detail::embed_segment(model, c, seg, latent_phase);
        detail::apply_patches(c, patches, 0, seg);
        for (int l = 0; l < L; ++l) {
            detail::layer_forward_segment(model, c, l, seg);
            detail::apply_patches(c, patches, l + 1, seg);
        }
    }

    if (logit_mode == LogitMode::LossRowsOnly) {
        c.loss_rows.clear();
        c.loss_targets.clear();
        for (int e = 0; e < c.B; ++e) {
            const auto& ex = *c.ex[static_cast<std::size_t>(e)];
            for (int t = 0; t < c.len[static_cast<std::size_t>(e)]; ++t) {
                if (!ex.loss_mask[static_cast<std::size_t>(t)]) continue;
                c.loss_rows.push_back(c.arow(e, t));
                c.loss_targets.push_back(ex.target_at(t));
            }
        }
        if (!c.loss_rows.empty()) {
            const Mat<T> h = detail::gather_rows(c.x[static_cast<std::size_t>(L)], c.loss_rows);
            lens_logits_rows(model, h, c.loss_lnf, c.loss_lnf_mean, c.loss_lnf_rstd, c.loss_probs);
            for (Eigen::Index r = 0; r < c.loss_probs.rows(); ++r) {
                auto row = c.loss_probs.row(r);
                softmax_inplace(row);
            }
        }
    } else if (logit_mode == LogitMode::AllRows) {
        Vec<T> mean, rstd;
        lens_logits_rows(model, c.x[static_cast<std::size_t>(L)], c.full_lnf, mean, rstd, c.full_logits);
    }
}

// ----------------------------- backward -----------------------------

template <class T>
struct GradBuffer {
    ModelConfig config;
    std::vector<T> flat;

    explicit GradBuffer(const ModelConfig& cfg) : config(cfg) {
        flat.assign(static_cast<std::size_t>(param_count(cfg)), T(0));
    }
    void zero() { std::fill(flat.begin(), flat.end(), T(0)); }
    ParamViews<T> views() { return {&config, flat.data()}; }
    ConstParamViews<T> views() const { return {&config, flat.data()}; }

    double squared_norm() const {
        double s = 0;
        for (const auto v : flat) s += static_cast<double>(v) * static_cast<double>(v);
        return s;
    }
};

// Reverse pass over a forward-populated cache. CE gradients flow from the
// stored softmax rows (weighted by cache.loss_weight); distillation
// gradients stored in cache.distill_grads are injected at their depths.
// Accumulates into `grads`.
template <class T>
void backward_batch(const ModelState<T>& model, BatchCache<T>& c, GradBuffer<T>& grads) {
    const int L = model.config.layers, d = model.config.d_model, H = model.config.heads,
              dh = model.config.head_dim();
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));
    const auto views = model.views();
    auto gv = grads.views();

    // Top-of-stack gradient arena: CE through LNf/unembedding.
    Mat<T> dtopce = Mat<T>::Zero(c.rows, d);
    if (!c.loss_rows.empty()) {
        Mat<T> dz = c.loss_probs;
        for (std::size_t i = 0; i < c.loss_rows.size(); ++i)
            dz(static_cast<Eigen::Index>(i), c.loss_targets[i]) -= T(1);
        dz *= static_cast<T>(c.loss_weight);
        gv.b_u().col(0).transpose() += dz.colwise().sum();
        gv.unemb().noalias() += c.loss_lnf.transpose() * dz;
        Mat<T> dlnf(dz.rows(), d);
        dlnf.noalias() = dz * views.unemb().transpose();
        const Mat<T> xl = detail::gather_rows(c.x[static_cast<std::size_t>(L)], c.loss_rows);
        Mat<T> dxl(dz.rows(), d);
        auto dg = gv.lnf_g();
        auto db = gv.lnf_b();
        layernorm_backward_rows<T>(xl, c.loss_lnf_mean, c.loss_lnf_rstd, views.lnf_g(), dlnf, dg, db, dxl);
        detail::scatter_add_rows(dxl, c.loss_rows, dtopce);
    }

    // Buffers accumulated across phases.
    std::vector<Mat<T>> dK(static_cast<std::size_t>(L)), dV(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) {
        dK[static_cast<std::size_t>(l)].setZero(c.rows, d);
        dV[static_cast<std::size_t>(l)].setZero(c.rows, d);
    }
    Mat<T> dtop_inj = Mat<T>::Zero(c.rows, d);  // gradient into x[L] from latent injections

    auto phases = detail::plan_segments(c);
    for (auto it = phases.rbegin(); it != phases.rend(); ++it) {
        const auto& seg = *it;
        if (seg.empty()) continue;
        const std::size_t phase_index = static_cast<std::size_t>(phases.rend() - 1 - it);
        const bool latent_phase =
            c.latent_steps > 0 && phase_index >= 1 && phase_index <= static_cast<std::size_t>(c.latent_steps);

        Mat<T> dx = detail::gather_rows(dtopce, seg.rows);
        dx += detail::gather_rows(dtop_inj, seg.rows);

        for (int l = L - 1; l >= 0; --l) {
            // Distillation gradient into the depth-(l+1) residual.
            for (const auto& [row, g] : c.distill_grads[static_cast<std::size_t>(l) + 1]) {
                for (int i = 0; i < seg.count(); ++i)
                    if (seg.rows[static_cast<std::size_t>(i)] == row)
                        dx.row(static_cast<Eigen::Index>(i)) += g.template cast<T>();
            }
            const auto lay = views.layer(l);
            auto glay = gv.layer(l);
            auto& acts = c.layers[static_cast<std::size_t>(l)];

            const Mat<T> xin = detail::gather_rows(c.x[static_cast<std::size_t>(l)], seg.rows);
            const Mat<T> m_pack = detail::gather_rows(acts.m, seg.rows);
            const Mat<T> g_pack = detail::gather_rows(acts.g, seg.rows);
            const Mat<T> u1_pack = detail::gather_rows(acts.u1, seg.rows);
            const Mat<T> ug_pack = detail::gather_rows(acts.ug, seg.rows);
            const Mat<T> a_pack = detail::gather_rows(acts.a, seg.rows);
            const Vec<T> ln1_mean = detail::gather_vec(acts.ln1_mean, seg.rows);
            const Vec<T> ln1_rstd = detail::gather_vec(acts.ln1_rstd, seg.rows);
            const Vec<T> ln2_mean = detail::gather_vec(acts.ln2_mean, seg.rows);
            const Vec<T> ln2_rstd = detail::gather_vec(acts.ln2_rstd, seg.rows);

            // MLP backward.
            glay.b2.col(0).transpose() += dx.colwise().sum();
            glay.w2.noalias() += ug_pack.transpose() * dx;
            Mat<T> dug(dx.rows(), model.config.mlp_dim());
            dug.noalias() = dx * lay.w2.transpose();
            Mat<T> du1 = dug.binaryExpr(u1_pack, [](T dy, T x) { return dy * gelu_grad(x); });
            glay.b1.col(0).transpose() += du1.colwise().sum();
            glay.w1.noalias() += g_pack.transpose() * du1;
            Mat<T> dgn(dx.rows(), d);
            dgn.noalias() = du1 * lay.w1.transpose();
            Mat<T> dm = dx;  // residual branch
            {
                Mat<T> dm_ln(dx.rows(), d);
                layernorm_backward_rows<T>(m_pack, ln2_mean, ln2_rstd, lay.ln2_g, dgn, glay.ln2_g, glay.ln2_b,
                                           dm_ln);
                dm += dm_ln;
            }

            // Attention output projection backward.
            const Mat<T> ctx_pack = detail::gather_rows(acts.ctx, seg.rows);
            glay.bo.col(0).transpose() += dm.colwise().sum();
            glay.wo.noalias() += ctx_pack.transpose() * dm;
            Mat<T> dctx(dx.rows(), d);
            dctx.noalias() = dm * lay.wo.transpose();
            Mat<T> dx_prev = dm;  // residual into x[l]

            // Attention core backward; contributions to earlier keys/values
            // accumulate in the arena-wide buffers.
            Mat<T> dq = Mat<T>::Zero(dx.rows(), d);
            auto& dK_l = dK[static_cast<std::size_t>(l)];
            auto& dV_l = dV[static_cast<std::size_t>(l)];
            for (int i = 0; i < seg.count(); ++i) {
                const int e = seg.exi[static_cast<std::size_t>(i)];
                const int t = seg.pos[static_cast<std::size_t>(i)];
                const int base = c.row0[static_cast<std::size_t>(e)];
                for (int h = 0; h < H; ++h) {
                    const auto& att = c.layers[static_cast<std::size_t>(l)].att[static_cast<std::size_t>(e) * H + h];
                    const auto alpha = att.row(t).head(t + 1).transpose().eval();  // (t+1)
                    auto kblk = acts.k.block(base, h * dh, t + 1, dh);
                    auto vblk = acts.v.block(base, h * dh, t + 1, dh);
                    const auto dctx_h = dctx.row(static_cast<Eigen::Index>(i)).segment(h * dh, dh).eval();
                    Vec<T> dalpha = vblk * dctx_h.transpose();
                    const T dot = alpha.dot(dalpha);
                    Vec<T> ds = (alpha.array() * (dalpha.array() - dot)).matrix();
                    dq.row(static_cast<Eigen::Index>(i)).segment(h * dh, dh).noalias() =
                        (ds.transpose() * kblk) * scale;
                    const auto q_head =
                        acts.q.row(seg.rows[static_cast<std::size_t>(i)]).segment(h * dh, dh).eval();
                    dK_l.block(base, h * dh, t + 1, dh).noalias() += (ds * q_head) * scale;
                    dV_l.block(base, h * dh, t + 1, dh).noalias() += alpha * dctx_h;
                }
            }

            // Own key/value gradients are complete now: all later queries ran
            // in earlier (reverse-order) phases, and this segment's queries
            // just contributed above.
            Mat<T> dk_seg = detail::gather_rows(dK_l, seg.rows);
            Mat<T> dv_seg = detail::gather_rows(dV_l, seg.rows);
            for (const int r : seg.rows) {
                dK_l.row(r).setZero();
                dV_l.row(r).setZero();
            }

            glay.bq.col(0).transpose() += dq.colwise().sum();
            glay.wq.noalias() += a_pack.transpose() * dq;
            glay.bk.col(0).transpose() += dk_seg.colwise().sum();
            glay.wk.noalias() += a_pack.transpose() * dk_seg;
            glay.bv.col(0).transpose() += dv_seg.colwise().sum();
            glay.wv.noalias() += a_pack.transpose() * dv_seg;

            Mat<T> da(dx.rows(), d);
            da.noalias() = dq * lay.wq.transpose();
            da.noalias() += dk_seg * lay.wk.transpose();
            da.noalias() += dv_seg * lay.wv.transpose();
            {
                Mat<T> dx_ln(dx.rows(), d);
                layernorm_backward_rows<T>(xin, ln1_mean, ln1_rstd, lay.ln1_g, da, glay.ln1_g, glay.ln1_b,
                                           dx_ln);
                dx_prev += dx_ln;
            }
            dx = std::move(dx_prev);
        }

        // Embedding backward.
        auto dtok = gv.tok_emb();
        auto dpos = gv.pos_emb();
        if (!latent_phase) {
            for (int i = 0; i < seg.count(); ++i) {
                const int e = seg.exi[static_cast<std::size_t>(i)];
                const int t = seg.pos[static_cast<std::size_t>(i)];
                const int id = c.ex[static_cast<std::size_t>(e)]->token_ids[static_cast<std::size_t>(t)];
                dtok.row(id) += dx.row(static_cast<Eigen::Index>(i));
                dpos.row(t) += dx.row(static_cast<Eigen::Index>(i));
            }
        } else {
            const Mat<T> aff_pack = detail::gather_rows(c.aff, seg.rows);
            const Vec<T> inj_mean = detail::gather_vec(c.inj_mean, seg.rows);
            const Vec<T> inj_rstd = detail::gather_vec(c.inj_rstd, seg.rows);
            Mat<T> daff(dx.rows(), d);
            auto dg = gv.proj_ln_g();
            auto db = gv.proj_ln_b();
            layernorm_backward_rows<T>(aff_pack, inj_mean, inj_rstd, views.proj_ln_g(), dx, dg, db, daff);
            Mat<T> prev(dx.rows(), d);
            for (int i = 0; i < seg.count(); ++i)
                prev.row(static_cast<Eigen::Index>(i)) =
                    c.x[static_cast<std::size_t>(L)].row(seg.rows[static_cast<std::size_t>(i)] - 1);
            gv.proj_b().col(0).transpose() += daff.colwise().sum();
            gv.proj_w().noalias() += prev.transpose() * daff;
            Mat<T> dprev(dx.rows(), d);
            dprev.noalias() = daff * views.proj_w().transpose();
            for (int i = 0; i < seg.count(); ++i)
                dtop_inj.row(seg.rows[static_cast<std::size_t>(i)] - 1) += dprev.row(static_cast<Eigen::Index>(i));
            for (int i = 0; i < seg.count(); ++i)
                dpos.row(seg.pos[static_cast<std::size_t>(i)]) += dx.row(static_cast<Eigen::Index>(i));
        }
    }
}

}  // namespace latentlab
