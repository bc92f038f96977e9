#pragma once

// Finite-difference oracle for the training gradients, in 64-bit arithmetic.
// The distillation target (teacher residuals at ANS) is frozen at the base
// parameters, matching the stop-gradient: the analytic gradient is the
// partial derivative with the teacher branch of the distillation term held
// constant.

#include <cmath>
#include <vector>

#include "latentlab/loss.hpp"

namespace latentlab::testsupport {

struct FrozenTeacher {
    // [example][depth 1..L] teacher residual rows at ANS.
    std::vector<std::vector<RowVec<double>>> rows;
};

inline FrozenTeacher freeze_teacher(const ModelState<double>& model,
                                    const std::vector<const SerializedExample*>& plain) {
    FrozenTeacher out;
    if (plain.empty()) return out;
    auto cache = make_batch_cache<double>(model.config, plain);
    forward_batch(model, cache, LogitMode::None);
    const int L = model.config.layers;
    out.rows.resize(plain.size());
    for (std::size_t e = 0; e < plain.size(); ++e)
        for (int l = 1; l <= L; ++l)
            out.rows[e].push_back(cache.x[static_cast<std::size_t>(l)].row(cache.ans_row[e]));
    return out;
}

// Loss evaluator independent of the loss_and_grads bookkeeping: full logits,
// own softmax/log, distillation against the frozen teacher rows.
inline double eval_total_loss(const ModelState<double>& model,
                              const std::vector<const SerializedExample*>& plain,
                              const std::vector<const SerializedExample*>& latent, const LossWeights& weights,
                              const FrozenTeacher& frozen, double normalizer) {
    auto masked_ce_full = [&](const std::vector<const SerializedExample*>& side, BatchCache<double>& cache) {
        forward_batch(model, cache, LogitMode::AllRows);
        double s = 0;
        int n = 0;
        for (int e = 0; e < cache.B; ++e) {
            const auto& ex = *side[static_cast<std::size_t>(e)];
            for (int t = 0; t < cache.len[static_cast<std::size_t>(e)]; ++t) {
                if (!ex.loss_mask[static_cast<std::size_t>(t)]) continue;
                const int row = cache.arow(e, t);
                const auto z = cache.full_logits.row(row);
                const double mx = z.maxCoeff();
                double denom = 0;
                for (Eigen::Index j = 0; j < z.size(); ++j) denom += std::exp(z(j) - mx);
                s += -(z(ex.target_at(t)) - mx - std::log(denom));
                ++n;
            }
        }
        return n > 0 ? s / n : 0.0;
    };

    double tce = 0, sce = 0, distill = 0;
    if (!plain.empty()) {
        auto cache = make_batch_cache<double>(model.config, plain);
        tce = masked_ce_full(plain, cache);
    }
    std::optional<BatchCache<double>> scache;
    if (!latent.empty()) {
        scache.emplace(make_batch_cache<double>(model.config, latent));
        sce = masked_ce_full(latent, *scache);
    }
    if (!frozen.rows.empty() && scache && weights.distill > 0) {
        const int L = model.config.layers, d = model.config.d_model;
        double raw = 0;
        for (std::size_t e = 0; e < latent.size(); ++e) {
            double acc = 0;
            for (int l = 1; l <= L; ++l) {
                const auto sv = scache->x[static_cast<std::size_t>(l)].row(scache->ans_row[e]);
                acc += (sv - frozen.rows[e][static_cast<std::size_t>(l) - 1]).cwiseAbs().sum() / d;
            }
            raw += acc;
        }
        raw /= static_cast<double>(latent.size());
        distill = raw / normalizer;
    }
    return weights.teacher * tce + weights.student * sce + weights.distill * distill;
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::int64_t worst_index = -1;
    std::int64_t checked = 0;
};

// Central differences with h = 1e-5. The pass rule carries a small absolute
// floor: below ~1e-7 the finite difference itself is dominated by
// cancellation noise in 64-bit arithmetic.
inline GradCheckReport gradcheck(ModelState<double>& model, const std::vector<const SerializedExample*>& plain,
                                 const std::vector<const SerializedExample*>& latent,
                                 const LossWeights& weights, double tolerance = 1e-4, int stride = 1) {
    const double h = 1e-5;
    const double normalizer = 1.0;  // fixed: the EMA is a constant during a step
    const auto frozen = freeze_teacher(model, plain);

    GradBuffer<double> grads(model.config);
    EmaNormalizer ema;
    LossOptions opts;
    opts.update_normalizer = false;
    opts.fixed_normalizer = normalizer;
    loss_and_grads(model, plain, latent, weights, ema, grads, opts);

    GradCheckReport report;
    const auto n = static_cast<std::int64_t>(model.flat.size());
    for (std::int64_t i = 0; i < n; i += stride) {
        const double orig = model.flat[static_cast<std::size_t>(i)];
        model.flat[static_cast<std::size_t>(i)] = orig + h;
        const double fp = eval_total_loss(model, plain, latent, weights, frozen, normalizer);
        model.flat[static_cast<std::size_t>(i)] = orig - h;
        const double fm = eval_total_loss(model, plain, latent, weights, frozen, normalizer);
        model.flat[static_cast<std::size_t>(i)] = orig;
        const double fd = (fp - fm) / (2 * h);
        const double a = grads.flat[static_cast<std::size_t>(i)];
        const double abs_err = std::abs(a - fd);
        report.checked += 1;
        if (abs_err <= 1e-8) continue;  // below the FD noise floor
        const double rel = abs_err / std::max(std::abs(a), std::abs(fd));
        if (rel > report.max_rel_err) {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    (void)tolerance;
    return report;
}

}  // namespace latentlab::testsupport
