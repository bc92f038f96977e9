#include <catch2/catch_amalgamated.hpp>

#include "latentlab/loss.hpp"
#include "support/gradcheck.hpp"

using namespace latentlab;
using namespace latentlab::testsupport;

namespace {

// Hand-built sequences so tiny vocabularies (V < 55) can be exercised.
SerializedExample plain_example(std::vector<int> ids, std::vector<int> mask_positions, int answer) {
    SerializedExample ex;
    ex.token_ids = std::move(ids);
    ex.roles.assign(ex.token_ids.size(), Role::Input);
    ex.roles.back() = Role::Ans;
    ex.loss_mask.assign(ex.token_ids.size(), false);
    for (const int p : mask_positions) ex.loss_mask[static_cast<std::size_t>(p)] = true;
    ex.answer = answer;
    ex.regime = Regime::NonCoT;
    return ex;
}

SerializedExample latent_example(std::vector<int> input_ids, int latents, int answer, int placeholder) {
    SerializedExample ex;
    for (const int id : input_ids) {
        ex.token_ids.push_back(id);
        ex.roles.push_back(Role::Input);
        ex.loss_mask.push_back(false);
    }
    ex.token_ids.push_back(placeholder);
    ex.roles.push_back(Role::Bot);
    ex.loss_mask.push_back(false);
    for (int j = 0; j < latents; ++j) {
        ex.token_ids.push_back(placeholder);
        ex.roles.push_back(Role::Latent);
        ex.loss_mask.push_back(false);
    }
    ex.token_ids.push_back(placeholder);
    ex.roles.push_back(Role::Eot);
    ex.loss_mask.push_back(false);
    ex.token_ids.push_back(placeholder);
    ex.roles.push_back(Role::Ans);
    ex.loss_mask.push_back(true);
    ex.answer = answer;
    ex.regime = Regime::Student;
    return ex;
}

}  // namespace

TEST_CASE("analytic gradients match central differences on tiny configs") {
    struct Case {
        ModelConfig cfg;
        std::uint64_t seed;
    };
    std::vector<Case> cases;
    {
        ModelConfig a;
        a.layers = 1;
        a.heads = 2;
        a.d_model = 8;
        a.vocab_size = 12;
        a.context_length = 16;
        a.latent_steps = 2;
        cases.push_back({a, 101});
        ModelConfig b;
        b.layers = 2;
        b.heads = 1;
        b.d_model = 12;
        b.vocab_size = 16;
        b.context_length = 16;
        b.latent_steps = 3;
        cases.push_back({b, 202});
        ModelConfig c;
        c.layers = 2;
        c.heads = 2;
        c.d_model = 16;
        c.vocab_size = 20;
        c.context_length = 16;
        c.latent_steps = 2;
        cases.push_back({c, 303});
    }

    for (const auto& tc : cases) {
        auto rng = Rng::seeded(tc.seed);
        auto model = init_model<double>(tc.cfg, rng);
        const int ph = tc.cfg.vocab_size - 1;

        // Mixed-length paired batch: trace-style supervision on the plain
        // side, one supervised answer on the latent side.
        std::vector<SerializedExample> plain{
            plain_example({3, 7, 1, 5, 2}, {2, 4}, 4),
            plain_example({2, 9, 4}, {1, 2}, 1),
        };
        std::vector<SerializedExample> latent{
            latent_example({3, 7, 1}, tc.cfg.latent_steps, 4, ph),
            latent_example({2, 9}, tc.cfg.latent_steps, 1, ph),
        };
        std::vector<const SerializedExample*> pp{&plain[0], &plain[1]};
        std::vector<const SerializedExample*> lp{&latent[0], &latent[1]};

        SECTION("joint objective, config seed " + std::to_string(tc.seed)) {
            LossWeights w;  // 1, 1, 1
            auto report = gradcheck(model, pp, lp, w);
            INFO("worst index " << report.worst_index << " over " << report.checked);
            CHECK(report.max_rel_err <= 1e-4);
        }
    }
}

TEST_CASE("plain-only and latent-only gradients also match") {
    ModelConfig cfg;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.d_model = 8;
    cfg.vocab_size = 12;
    cfg.context_length = 16;
    cfg.latent_steps = 2;
    auto rng = Rng::seeded(404);
    auto model = init_model<double>(cfg, rng);
    std::vector<SerializedExample> plain{plain_example({3, 7, 1, 5}, {1, 3}, 4)};
    std::vector<SerializedExample> latent{latent_example({3, 7}, 2, 4, 11)};
    std::vector<const SerializedExample*> pp{&plain[0]};
    std::vector<const SerializedExample*> lp{&latent[0]};

    {
        LossWeights w{1.0, 0.0, 0.0};
        auto report = gradcheck(model, pp, {}, w);
        CHECK(report.max_rel_err <= 1e-4);
    }
    {
        LossWeights w{0.0, 1.0, 0.0};
        auto report = gradcheck(model, {}, lp, w);
        CHECK(report.max_rel_err <= 1e-4);
    }
}

TEST_CASE("distillation is zero for identical streams and stops teacher gradients") {
    ModelConfig cfg;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.d_model = 8;
    cfg.vocab_size = 12;
    cfg.context_length = 16;
    cfg.latent_steps = 2;
    auto rng = Rng::seeded(505);
    auto model = init_model<double>(cfg, rng);
    // Same example on both sides: identical activations at every depth.
    std::vector<SerializedExample> latent{latent_example({3, 7}, 2, 4, 11)};
    std::vector<const SerializedExample*> side{&latent[0]};
    GradBuffer<double> grads(cfg);
    EmaNormalizer ema;
    LossOptions opts;
    opts.fixed_normalizer = 1.0;
    opts.update_normalizer = false;
    const auto breakdown = loss_and_grads(model, side, side, LossWeights{0.0, 0.0, 1.0}, ema, grads, opts);
    CHECK(breakdown.distill_raw == 0.0);
    CHECK(breakdown.distill == 0.0);
    // sign(0) = 0: a pure distillation objective on identical streams sends
    // no gradient anywhere.
    CHECK(grads.squared_norm() == 0.0);
}
