#pragma once

// End-to-end training for the three regimes over the shared backbone, with
// checkpointing, JSONL metrics, divergence handling, and the ablation
// switches (drop distillation, drop the teacher objective).

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "latentlab/checkpoint.hpp"
#include "latentlab/curriculum.hpp"
#include "latentlab/loss.hpp"
#include "latentlab/optimizer.hpp"

namespace latentlab {

enum class TrainRegime { CODI, FullCoT, NonCoT };

inline const char* train_regime_name(TrainRegime r) {
    switch (r) {
        case TrainRegime::CODI: return "codi";
        case TrainRegime::FullCoT: return "full-cot";
        case TrainRegime::NonCoT: return "non-cot";
    }
    return "?";
}

inline TrainRegime train_regime_from_name(const std::string& s) {
    if (s == "codi") return TrainRegime::CODI;
    if (s == "full-cot" || s == "fullcot") return TrainRegime::FullCoT;
    if (s == "non-cot" || s == "noncot") return TrainRegime::NonCoT;
    throw ConfigError("unknown training regime: " + s);
}

struct TrainConfig {
    TaskSpec task;
    ModelConfig model;
    TrainRegime regime = TrainRegime::CODI;
    int epochs = 1000;
    int batch_size = 256;
    std::int64_t per_length = 2500;
    std::int64_t test_per_length = 1000;
    LossWeights weights;  // teacher_ce, student_ce, distill; 1.0 each
    bool no_distill = false;
    bool no_teacher = false;
    std::uint64_t seed = 0;
    OptimizerConfig optim;  // total_steps filled in by train()
    int ckpt_interval = 0;  // epochs between checkpoints; 0 = final only
    int eval_interval = 0;  // epochs between held-out evals; 0 = final only
    std::int64_t eval_subset = 200;  // per-length cap for periodic evals
    std::string out_dir;    // empty = keep everything in memory

    void validate() const {
        task.validate();
        model.validate();
        if (epochs < 1 || batch_size < 1 || per_length < 1) throw ConfigError("TrainConfig: nonpositive sizes");
        if (weights.teacher < 0 || weights.student < 0 || weights.distill < 0)
            throw ConfigError("TrainConfig: loss weights must be nonnegative");
        if (no_teacher && !no_distill)
            throw ConfigError("TrainConfig: no_teacher implies no_distill");
        const std::int64_t longest = 2 * task.seq_len() + 2;  // teacher layout dominates
        if (longest > model.context_length)
            throw ConfigError("TrainConfig: context too short for the longest teacher sequence");
    }
};

struct LengthAccuracy {
    std::int64_t length = 0;
    std::int64_t correct = 0;
    std::int64_t total = 0;
    double accuracy() const { return total > 0 ? static_cast<double>(correct) / total : 0.0; }
};

struct EvalResult {
    std::vector<LengthAccuracy> per_length;
    double trace_exact = 0.0;  // FullCoT only: fraction of rollouts with a perfect trace

    double aggregate() const {
        std::int64_t c = 0, n = 0;
        for (const auto& la : per_length) {
            c += la.correct;
            n += la.total;
        }
        return n > 0 ? static_cast<double>(c) / n : 0.0;
    }
};

struct EpochRecord {
    int epoch = 0;
    double teacher_ce = 0, student_ce = 0, distill = 0, total = 0;
    double lr = 0, grad_norm = 0, wall_s = 0;
    std::optional<double> eval_accuracy;
};

struct TrainMetrics {
    std::vector<EpochRecord> epochs;
    EvalResult final_eval;
    double wall_clock_s = 0;
};

// ----------------------------- evaluation -----------------------------

namespace detail {

template <class T>
std::vector<int> answer_predictions(const ModelState<T>& model, const std::vector<SerializedExample>& exs) {
    std::vector<int> preds(exs.size(), -1);
    const std::size_t chunk = 512;
    for (std::size_t start = 0; start < exs.size(); start += chunk) {
        const std::size_t end = std::min(exs.size(), start + chunk);
        std::vector<const SerializedExample*> ptrs;
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&exs[i]);
        auto cache = make_batch_cache<T>(model.config, ptrs);
        forward_batch(model, cache, LogitMode::LossRowsOnly);
        // One supervised row per example: the ANS position.
        if (cache.loss_rows.size() != ptrs.size())
            throw ConfigError("answer_predictions: examples must supervise exactly the ANS position");
        for (std::size_t i = 0; i < ptrs.size(); ++i)
            preds[start + i] = argmax_row(cache.loss_probs, static_cast<int>(i));
    }
    return preds;
}

// Greedy rollout for explicit-trace models: generate the trace token by
// token, force the ANS boundary after T-1 steps, then read the answer.
template <class T>
void rollout_eval(const ModelState<T>& model, const std::vector<TaskInstance>& instances, LengthAccuracy& acc,
                  std::int64_t& trace_hits) {
    if (instances.empty()) return;
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < instances.size(); start += chunk) {
        const std::size_t end = std::min(instances.size(), start + chunk);
        const std::size_t n = end - start;
        std::vector<SerializedExample> seqs(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& inst = instances[start + i];
            auto& ex = seqs[i];
            for (const auto x : inst.inputs) {
                ex.token_ids.push_back(Vocabulary::value_token(static_cast<int>(x)));
                ex.roles.push_back(Role::Input);
                ex.loss_mask.push_back(false);
            }
            ex.token_ids.push_back(Vocabulary::kEoi);
            ex.roles.push_back(Role::Eoi);
            ex.loss_mask.push_back(false);
            ex.answer = inst.answer();
        }
        const auto len = instances[start].seq_len();
        std::vector<bool> trace_ok(n, true);
        auto step_all = [&](Role role, int forced_id) {
            std::vector<const SerializedExample*> ptrs;
            for (const auto& s : seqs) ptrs.push_back(&s);
            auto cache = make_batch_cache<T>(model.config, ptrs);
            forward_batch(model, cache, LogitMode::AllRows);
            std::vector<int> next(n);
            for (std::size_t i = 0; i < n; ++i) {
                const int last = cache.arow(static_cast<int>(i), seqs[i].length() - 1);
                next[i] = argmax_row(cache.full_logits, last);
            }
            for (std::size_t i = 0; i < n; ++i) {
                seqs[i].token_ids.push_back(forced_id >= 0 ? forced_id : next[i]);
                seqs[i].roles.push_back(role);
                seqs[i].loss_mask.push_back(false);
            }
            return next;
        };
        for (std::int64_t t = 1; t < len; ++t) {
            const auto generated = step_all(Role::Trace, -1);
            for (std::size_t i = 0; i < n; ++i)
                if (generated[i] != static_cast<int>(instances[start + i].states[static_cast<std::size_t>(t - 1)]))
                    trace_ok[i] = false;
        }
        step_all(Role::Ans, Vocabulary::kAns);
        // Final readout at the ANS position.
        std::vector<const SerializedExample*> ptrs;
        for (const auto& s : seqs) ptrs.push_back(&s);
        auto cache = make_batch_cache<T>(model.config, ptrs);
        forward_batch(model, cache, LogitMode::AllRows);
        for (std::size_t i = 0; i < n; ++i) {
            const int last = cache.arow(static_cast<int>(i), seqs[i].length() - 1);
            const int pred = argmax_row(cache.full_logits, last);
            acc.total += 1;
            if (pred == static_cast<int>(instances[start + i].answer())) acc.correct += 1;
            if (trace_ok[i]) trace_hits += 1;
        }
    }
}

}  // namespace detail

// Greedy exact-match accuracy per length plus the aggregate over all test
// examples. FullCoT rolls the trace out autoregressively before the answer.
template <class T>
EvalResult evaluate(const ModelState<T>& model, const Curriculum& data, TrainRegime regime,
                    std::int64_t per_length_cap = 0) {
    EvalResult out;
    std::int64_t trace_hits = 0, rollout_total = 0;
    for (const auto& g : data.groups) {
        LengthAccuracy la;
        la.length = g.length;
        std::vector<TaskInstance> subset = g.test;
        if (per_length_cap > 0 && static_cast<std::int64_t>(subset.size()) > per_length_cap)
            subset.resize(static_cast<std::size_t>(per_length_cap));
        if (subset.empty()) {
            out.per_length.push_back(la);
            continue;
        }
        if (regime == TrainRegime::FullCoT) {
            detail::rollout_eval(model, subset, la, trace_hits);
            rollout_total += la.total;
        } else {
            std::vector<SerializedExample> exs;
            exs.reserve(subset.size());
            for (const auto& inst : subset)
                exs.push_back(serialize(inst,
                                        regime == TrainRegime::CODI ? Regime::Student : Regime::NonCoT,
                                        model.config.latent_steps, model.config.context_length));
            const auto preds = detail::answer_predictions(model, exs);
            for (std::size_t i = 0; i < preds.size(); ++i) {
                la.total += 1;
                if (preds[i] == static_cast<int>(subset[i].answer())) la.correct += 1;
            }
        }
        out.per_length.push_back(la);
    }
    out.trace_exact = rollout_total > 0 ? static_cast<double>(trace_hits) / rollout_total : 0.0;
    return out;
}

// ----------------------------- training -----------------------------

namespace detail {

struct TrainItem {
    SerializedExample plain;   // teacher or no-trace layout; empty if unused
    SerializedExample latent;  // student layout; empty if unused
};

inline nlohmann::ordered_json config_json(const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["task"] = {{"m", cfg.task.modulus}, {"b", cfg.task.bias}, {"hops", cfg.task.hops},
                 {"input_low", cfg.task.input_low}, {"input_high", cfg.task.input_high}};
    j["model"] = {{"layers", cfg.model.layers},   {"heads", cfg.model.heads},
                  {"d_model", cfg.model.d_model}, {"context_length", cfg.model.context_length},
                  {"vocab_size", cfg.model.vocab_size}, {"latent_steps", cfg.model.latent_steps}};
    j["regime"] = train_regime_name(cfg.regime);
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["per_length"] = cfg.per_length;
    j["test_per_length"] = cfg.test_per_length;
    j["weights"] = {{"teacher", cfg.weights.teacher}, {"student", cfg.weights.student},
                    {"distill", cfg.weights.distill}};
    j["no_distill"] = cfg.no_distill;
    j["no_teacher"] = cfg.no_teacher;
    j["seed"] = cfg.seed;
    j["optim"] = {{"peak_lr", cfg.optim.peak_lr}, {"warmup_ratio", cfg.optim.warmup_ratio},
                  {"weight_decay", cfg.optim.weight_decay}, {"clip_norm", cfg.optim.clip_norm},
                  {"beta1", cfg.optim.beta1}, {"beta2", cfg.optim.beta2}, {"eps", cfg.optim.eps}};
    return j;
}

}  // namespace detail

template <class T = float>
struct TrainOutput {
    ModelState<T> model;
    TrainMetrics metrics;
    Curriculum data;  // kept for downstream analysis on the same split
};

template <class T = float>
TrainOutput<T> train(const TrainConfig& cfg) {
    cfg.validate();
    const auto t_start = std::chrono::steady_clock::now();
    auto root_rng = Rng::seeded(cfg.seed);
    auto data_rng = root_rng.derive(1);
    auto model_rng = root_rng.derive(2);
    auto shuffle_rng = root_rng.derive(3);

    Curriculum data = make_curriculum(cfg.task, cfg.per_length, data_rng, cfg.test_per_length);

    // Serialize the training side once.
    const bool want_plain = cfg.regime != TrainRegime::CODI || !cfg.no_teacher;
    const bool want_latent = cfg.regime == TrainRegime::CODI;
    std::vector<detail::TrainItem> items;
    items.reserve(data.train_size());
    for (const auto& g : data.groups) {
        for (const auto& inst : g.train) {
            detail::TrainItem item;
            if (cfg.regime == TrainRegime::CODI) {
                if (want_plain)
                    item.plain = serialize(inst, Regime::Teacher, cfg.model.latent_steps, cfg.model.context_length);
                item.latent = serialize(inst, Regime::Student, cfg.model.latent_steps, cfg.model.context_length);
            } else if (cfg.regime == TrainRegime::FullCoT) {
                item.plain = serialize(inst, Regime::Teacher, cfg.model.latent_steps, cfg.model.context_length);
            } else {
                item.plain = serialize(inst, Regime::NonCoT, cfg.model.latent_steps, cfg.model.context_length);
            }
            items.push_back(std::move(item));
        }
    }

    LossWeights weights = cfg.weights;
    if (cfg.regime != TrainRegime::CODI) {
        weights.student = 0.0;
        weights.distill = 0.0;
    }
    if (cfg.no_distill) weights.distill = 0.0;
    if (cfg.no_teacher) {
        weights.teacher = 0.0;
        weights.distill = 0.0;
    }

    auto model = init_model<T>(cfg.model, model_rng);
    const std::int64_t steps_per_epoch =
        (static_cast<std::int64_t>(items.size()) + cfg.batch_size - 1) / cfg.batch_size;
    OptimizerConfig ocfg = cfg.optim;
    ocfg.total_steps = steps_per_epoch * cfg.epochs;
    OptimizerState<T> opt(cfg.model, ocfg);
    EmaNormalizer normalizer;
    GradBuffer<T> grads(cfg.model);

    const bool emit = !cfg.out_dir.empty();
    std::ofstream metrics_out;
    if (emit) {
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream cj(cfg.out_dir + "/config.json");
        cj << detail::config_json(cfg).dump(2) << "\n";
        metrics_out.open(cfg.out_dir + "/metrics.jsonl");
        if (!metrics_out) throw IoError("cannot write metrics in " + cfg.out_dir);
    }

    TrainMetrics metrics;
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    ModelState<T> last_good = model;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto e_start = std::chrono::steady_clock::now();
        auto erng = shuffle_rng.derive(static_cast<std::uint64_t>(epoch));
        erng.shuffle(order);
        EpochRecord rec;
        rec.epoch = epoch;
        double gnorm_sum = 0;
        for (std::int64_t s = 0; s < steps_per_epoch; ++s) {
            std::vector<const SerializedExample*> plain_ptrs, latent_ptrs;
            const std::size_t lo = static_cast<std::size_t>(s) * cfg.batch_size;
            const std::size_t hi = std::min(items.size(), lo + cfg.batch_size);
            for (std::size_t i = lo; i < hi; ++i) {
                const auto& item = items[order[i]];
                if (want_plain && item.plain.length() > 0) plain_ptrs.push_back(&item.plain);
                if (want_latent && item.latent.length() > 0) latent_ptrs.push_back(&item.latent);
            }
            grads.zero();
            LossBreakdown lb;
            try {
                lb = loss_and_grads(model, plain_ptrs, latent_ptrs, weights, normalizer, grads);
            } catch (const NumericalError& e) {
                if (emit) save_checkpoint(cfg.out_dir + "/ckpt_lastgood.bin", last_good,
                                          {{"epoch", epoch}, {"step", opt.step}, {"reason", e.what()}});
                throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                     ", step " + std::to_string(opt.step) +
                                     (emit ? "; last good checkpoint written" : ""));
            }
            const double lr = lr_at(opt.step, ocfg);
            gnorm_sum += clip_global_norm(grads, ocfg.clip_norm);
            adamw_step(opt, model, grads, lr);
            rec.teacher_ce += lb.teacher_ce;
            rec.student_ce += lb.student_ce;
            rec.distill += lb.distill;
            rec.total += lb.total;
            rec.lr = lr;
        }
        rec.teacher_ce /= static_cast<double>(steps_per_epoch);
        rec.student_ce /= static_cast<double>(steps_per_epoch);
        rec.distill /= static_cast<double>(steps_per_epoch);
        rec.total /= static_cast<double>(steps_per_epoch);
        rec.grad_norm = gnorm_sum / static_cast<double>(steps_per_epoch);
        rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - e_start).count();

        if (!model.all_finite()) {
            if (emit) save_checkpoint(cfg.out_dir + "/ckpt_lastgood.bin", last_good, {{"epoch", epoch}});
            throw NumericalError("parameters diverged at epoch " + std::to_string(epoch));
        }
        last_good = model;

        const bool do_eval = cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0;
        if (do_eval) {
            const auto ev = evaluate(model, data, cfg.regime, cfg.eval_subset);
            rec.eval_accuracy = ev.aggregate();
        }
        if (emit) {
            nlohmann::ordered_json j;
            j["epoch"] = rec.epoch;
            j["teacher_ce"] = rec.teacher_ce;
            j["student_ce"] = rec.student_ce;
            j["distill"] = rec.distill;
            j["total"] = rec.total;
            j["lr"] = rec.lr;
            j["grad_norm"] = rec.grad_norm;
            j["wall_s"] = rec.wall_s;
            if (rec.eval_accuracy) j["eval_accuracy"] = *rec.eval_accuracy;
            metrics_out << j.dump() << "\n";
            if (cfg.ckpt_interval > 0 && (epoch + 1) % cfg.ckpt_interval == 0)
                save_checkpoint(cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".bin", model,
                                {{"epoch", epoch + 1}, {"step", opt.step}});
        }
        metrics.epochs.push_back(std::move(rec));
    }

    metrics.final_eval = evaluate(model, data, cfg.regime);
    metrics.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    if (emit) {
        save_checkpoint(cfg.out_dir + "/ckpt_final.bin", model,
                        {{"epoch", cfg.epochs},
                         {"step", opt.step},
                         {"final_accuracy", metrics.final_eval.aggregate()}});
        nlohmann::ordered_json j;
        j["final"] = true;
        j["aggregate_accuracy"] = metrics.final_eval.aggregate();
        nlohmann::ordered_json per;
        for (const auto& la : metrics.final_eval.per_length)
            per[std::to_string(la.length)] = la.accuracy();
        j["per_length"] = per;
        if (cfg.regime == TrainRegime::FullCoT) j["trace_exact"] = metrics.final_eval.trace_exact;
        j["wall_clock_s"] = metrics.wall_clock_s;
        metrics_out << j.dump() << "\n";
    }
    return {std::move(model), std::move(metrics), std::move(data)};
}

}  // namespace latentlab
