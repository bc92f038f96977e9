#pragma once

// Loss assembly for the three regimes over a shared backbone:
//   (a) teacher cross-entropy on masked positions of explicit-trace
//       sequences (also used for the plain no-trace baseline),
//   (b) student cross-entropy on the answer prediction at ANS,
//   (c) feature distillation: mean absolute difference between teacher and
//       student residuals at their ANS positions, summed over depths
//       1..L, divided by a running estimate of the loss's standard
//       deviation. No gradient flows into the teacher branch through (c).

#include <cmath>
#include <vector>

#include "latentlab/kernel.hpp"

namespace latentlab {

struct LossWeights {
    double teacher = 1.0;
    double student = 1.0;
    double distill = 1.0;
};

// Exponential moving estimate of the distillation loss's standard deviation
// across per-example values. Seeded by the first batch; decay 0.99.
struct EmaNormalizer {
    double decay = 0.99;
    double mean = 0.0;
    double mean_sq = 0.0;
    bool initialized = false;

    void update(const std::vector<double>& values) {
        if (values.empty()) return;
        double bm = 0.0, bs = 0.0;
        for (const double v : values) {
            bm += v;
            bs += v * v;
        }
        bm /= static_cast<double>(values.size());
        bs /= static_cast<double>(values.size());
        if (!initialized) {
            mean = bm;
            mean_sq = bs;
            initialized = true;
        } else {
            mean = decay * mean + (1.0 - decay) * bm;
            mean_sq = decay * mean_sq + (1.0 - decay) * bs;
        }
    }

    double stddev() const { return std::sqrt(std::max(mean_sq - mean * mean, 0.0)); }
    double normalizer() const { return std::max(stddev(), 1e-8); }
};

struct LossOptions {
    bool update_normalizer = true;
    // Overrides the EMA for gradient checking, where the normalizer must be
    // a constant across finite-difference evaluations.
    double fixed_normalizer = 0.0;  // <= 0 means use the EMA
};

struct LossBreakdown {
    double teacher_ce = 0.0;
    double student_ce = 0.0;
    double distill_raw = 0.0;  // before normalization
    double distill = 0.0;      // normalized component entering the total
    double total = 0.0;
    int teacher_rows = 0;
    int student_rows = 0;

    bool finite() const {
        return std::isfinite(teacher_ce) && std::isfinite(student_ce) && std::isfinite(distill) &&
               std::isfinite(total);
    }
};

namespace detail {

template <class T>
double masked_ce(const BatchCache<T>& c) {
    double s = 0.0;
    for (std::size_t i = 0; i < c.loss_rows.size(); ++i) {
        const double p = static_cast<double>(c.loss_probs(static_cast<Eigen::Index>(i), c.loss_targets[i]));
        s += -std::log(std::max(p, 1e-30));
    }
    return c.loss_rows.empty() ? 0.0 : s / static_cast<double>(c.loss_rows.size());
}

}  // namespace detail

// One optimization step's losses and gradients. `plain` holds teacher or
// no-trace serializations (processed in plain mode); `latent` holds student
// serializations. For distillation the two lists must be index-paired views
// of the same instances. Either list may be empty. Gradients accumulate into
// `grads` (caller zeroes it).
template <class T>
LossBreakdown loss_and_grads(const ModelState<T>& model, const std::vector<const SerializedExample*>& plain,
                             const std::vector<const SerializedExample*>& latent, const LossWeights& weights,
                             EmaNormalizer& normalizer, GradBuffer<T>& grads, const LossOptions& opts = {}) {
    const int L = model.config.layers;
    const int d = model.config.d_model;
    LossBreakdown out;

    std::optional<BatchCache<T>> tc, sc;
    if (!plain.empty()) {
        tc.emplace(make_batch_cache<T>(model.config, plain));
        forward_batch(model, *tc, LogitMode::LossRowsOnly);
        out.teacher_rows = static_cast<int>(tc->loss_rows.size());
        out.teacher_ce = detail::masked_ce(*tc);
    }
    if (!latent.empty()) {
        sc.emplace(make_batch_cache<T>(model.config, latent));
        forward_batch(model, *sc, LogitMode::LossRowsOnly);
        out.student_rows = static_cast<int>(sc->loss_rows.size());
        out.student_ce = detail::masked_ce(*sc);
    }

    const bool do_distill = weights.distill > 0.0 && tc && sc;
    if (do_distill) {
        if (plain.size() != latent.size())
            throw ConfigError("loss_and_grads: distillation needs index-paired teacher/student batches");
        std::vector<double> per_example(latent.size(), 0.0);
        for (std::size_t e = 0; e < latent.size(); ++e) {
            const int tr = tc->ans_row[e], sr = sc->ans_row[e];
            if (tr < 0 || sr < 0) throw ConfigError("loss_and_grads: example lacks an ANS position");
            double acc = 0.0;
            for (int l = 1; l <= L; ++l) {
                const auto tv = tc->x[static_cast<std::size_t>(l)].row(tr);
                const auto sv = sc->x[static_cast<std::size_t>(l)].row(sr);
                acc += static_cast<double>((sv - tv).cwiseAbs().sum()) / d;
            }
            per_example[e] = acc;
        }
        double raw = 0.0;
        for (const double v : per_example) raw += v;
        raw /= static_cast<double>(per_example.size());
        if (opts.update_normalizer) normalizer.update(per_example);
        const double denom = opts.fixed_normalizer > 0.0 ? opts.fixed_normalizer : normalizer.normalizer();
        out.distill_raw = raw;
        out.distill = raw / denom;

        // Stop-gradient on the teacher: inject sign gradients only into the
        // student cache.
        const double gscale = weights.distill / (denom * static_cast<double>(latent.size()) * d);
        for (std::size_t e = 0; e < latent.size(); ++e) {
            const int tr = tc->ans_row[e], sr = sc->ans_row[e];
            for (int l = 1; l <= L; ++l) {
                const auto tv = tc->x[static_cast<std::size_t>(l)].row(tr);
                const auto sv = sc->x[static_cast<std::size_t>(l)].row(sr);
                RowVec<T> g(d);
                for (int j = 0; j < d; ++j) {
                    const T diff = sv(j) - tv(j);
                    g(j) = static_cast<T>(diff > T(0) ? gscale : (diff < T(0) ? -gscale : 0.0));
                }
                sc->distill_grads[static_cast<std::size_t>(l)].emplace_back(sr, std::move(g));
            }
        }
    }

    if (tc && out.teacher_rows > 0 && weights.teacher > 0.0) {
        tc->loss_weight = weights.teacher / out.teacher_rows;
        backward_batch(model, *tc, grads);
    }
    if (sc && (out.student_rows > 0 || do_distill)) {
        sc->loss_weight = weights.student > 0.0 && out.student_rows > 0
                              ? weights.student / out.student_rows
                              : 0.0;
        backward_batch(model, *sc, grads);
    }

    out.total = weights.teacher * out.teacher_ce + weights.student * out.student_ce +
                weights.distill * out.distill;
    if (!out.finite()) throw NumericalError("loss_and_grads: non-finite loss component");
    return out;
}

// ----------------------------- analysis forward -----------------------------

// Residual streams, attention maps, and logits for one example; depths are
// 0 (pre-layer-1) through L (post final layer).
template <class T>
struct ActivationCache {
    ModelConfig cfg;
    int length = 0;
    std::vector<Mat<T>> resid;             // L+1 matrices, T x d
    std::vector<std::vector<Mat<T>>> att;  // [layer][head], T x T
    Mat<T> lnf;                            // T x d, pre-unembedding states
    Mat<T> logits;                         // T x V
};

// Plain or latent-feedback forward for a single example with optional
// activation capture and patches. Latent mode is triggered by the example's
// roles. Returns logits at every position.
template <class T>
Mat<T> forward_example(const ModelState<T>& model, const SerializedExample& ex,
                       std::type_identity_t<ActivationCache<T>>* capture = nullptr,
                       const std::type_identity_t<PatchList<T>>* patches = nullptr) {
    std::vector<const SerializedExample*> one{&ex};
    BatchCache<T> c = make_batch_cache<T>(model.config, one);
    std::vector<PatchList<T>> pl;
    if (patches) pl.push_back(*patches);
    forward_batch(model, c, LogitMode::AllRows, patches ? &pl : nullptr);
    if (capture) {
        capture->cfg = model.config;
        capture->length = c.len[0];
        capture->resid.assign(c.x.begin(), c.x.end());
        capture->att.clear();
        capture->att.resize(static_cast<std::size_t>(model.config.layers));
        for (int l = 0; l < model.config.layers; ++l)
            for (int h = 0; h < model.config.heads; ++h)
                capture->att[static_cast<std::size_t>(l)].push_back(
                    c.layers[static_cast<std::size_t>(l)].att[static_cast<std::size_t>(h)]);
        capture->lnf = c.full_lnf;
        capture->logits = c.full_logits;
    }
    return c.full_logits;
}

// Greedy readout at a row of logits; ties break to the lowest token id.
template <class T>
int argmax_row(const Mat<T>& logits, int row) {
    int best = 0;
    T best_v = logits(row, 0);
    for (int j = 1; j < static_cast<int>(logits.cols()); ++j) {
        if (logits(row, j) > best_v) {
            best_v = logits(row, j);
            best = j;
        }
    }
    return best;
}

}  // namespace latentlab
