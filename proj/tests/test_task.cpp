#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "latentlab/curriculum.hpp"
#include "latentlab/dataset_io.hpp"
#include "latentlab/serialize.hpp"
#include "latentlab/task.hpp"

using namespace latentlab;

static TaskInstance instance_from_inputs(const TaskSpec& spec, std::vector<std::int64_t> inputs) {
    TaskInstance inst;
    inst.spec = spec;
    inst.inputs = std::move(inputs);
    inst.states = roll_states(spec, inst.inputs);
    return inst;
}

TEST_CASE("recurrence on hand-checked instances") {
    const auto spec = TaskSpec::make(50, 1, 2);
    const auto inst = instance_from_inputs(spec, {3, 4, 5});
    CHECK(inst.states == std::vector<std::int64_t>{3, 13, 16});

    // x_t = 1 reduces the update to s_t = s_{t-1} + 1.
    const auto ones = instance_from_inputs(spec, {7, 1, 1});
    CHECK(ones.states == std::vector<std::int64_t>{7, 8, 9});

    // b = 0 makes 0 absorbing.
    const auto spec0 = TaskSpec::make(50, 0, 3);
    const auto absorbing = instance_from_inputs(spec0, {10, 5, 7, 9});
    CHECK(absorbing.states[1] == 0);
    CHECK(absorbing.states[2] == 0);
    CHECK(absorbing.states[3] == 0);
}

TEST_CASE("generation is deterministic and in-bounds") {
    const auto spec = TaskSpec::make(50, 1, 4);
    auto rng1 = Rng::seeded(42);
    auto rng2 = Rng::seeded(42);
    const auto a = generate_instance(spec, rng1);
    const auto b = generate_instance(spec, rng2);
    CHECK(a.inputs == b.inputs);
    CHECK(a.states == b.states);
    for (const auto x : a.inputs) {
        CHECK(x >= 1);
        CHECK(x <= 49);
    }
    CHECK_THROWS_AS(TaskSpec::make(1, 0, 1), ConfigError);
}

TEST_CASE("closed form equals the recurrence") {
    const auto spec = TaskSpec::make(50, 1, 2);
    const auto inst = instance_from_inputs(spec, {3, 4, 5});
    CHECK(closed_form_answer(inst) == 16);  // 60 + 5 + 1 = 66 = 16 (mod 50)
    CHECK(closed_form_answer(inst) == inst.states.back());

    // Length 1: answer is x_1.
    const auto one = instance_from_inputs(TaskSpec::make(50, 1, 1), {37});
    CHECK(closed_form_answer(one) == 37);

    // Randomized cross-check over the modulus sweep.
    for (std::int64_t m = 41; m <= 50; ++m) {
        auto rng = Rng::seeded(1000 + static_cast<std::uint64_t>(m));
        const auto sp = TaskSpec::make(m, 1, 6);
        for (int i = 0; i < 500; ++i) {
            const auto x = generate_instance(sp, rng);
            CHECK(closed_form_answer(x) == x.states.back());
        }
    }
}

TEST_CASE("input corruption doubles mod m and recomputes states") {
    const auto spec = TaskSpec::make(50, 1, 2);
    auto inst = instance_from_inputs(spec, {30, 4, 25});
    const auto c1 = corrupt_input(inst, 1);
    CHECK(c1.inputs[0] == 10);  // 60 mod 50
    const auto c3 = corrupt_input(inst, 3);
    CHECK(c3.inputs[2] == 0);  // 50 mod 50; kept verbatim though outside sampling bounds
    CHECK(c3.states == roll_states(spec, c3.inputs));
    CHECK(c3.states.back() == ((inst.states[1] * 0 + 1) % 50));
    CHECK_THROWS_AS(corrupt_input(inst, 0), ConfigError);
    CHECK_THROWS_AS(corrupt_input(inst, 4), ConfigError);
}

TEST_CASE("teacher serialization layout and mask") {
    const auto spec = TaskSpec::make(50, 1, 2);
    const auto inst = instance_from_inputs(spec, {3, 4, 5});
    const auto ex = serialize(inst, Regime::Teacher);
    CHECK(ex.token_ids == std::vector<int>{3, 4, 5, Vocabulary::kEoi, 3, 13, Vocabulary::kAns, 16});
    CHECK(ex.answer == 16);
    // Supervised predictions target exactly the trace tokens plus the answer.
    std::vector<int> targets;
    for (int i = 0; i < ex.length(); ++i)
        if (ex.loss_mask[static_cast<std::size_t>(i)]) targets.push_back(ex.target_at(i));
    CHECK(targets == std::vector<int>{3, 13, 16});
    CHECK(ex.roles[7] == Role::AnswerTarget);
}

TEST_CASE("student serialization carries one supervised position") {
    const auto spec = TaskSpec::make(50, 1, 2);
    const auto inst = instance_from_inputs(spec, {3, 4, 5});
    const auto ex = serialize(inst, Regime::Student, 6);
    CHECK(ex.length() == 3 + 1 + 6 + 1 + 1);
    CHECK(ex.roles[3] == Role::Bot);
    CHECK(ex.latent_positions() == std::vector<int>{4, 5, 6, 7, 8, 9});
    CHECK(ex.roles[10] == Role::Eot);
    CHECK(ex.roles[11] == Role::Ans);
    int supervised = 0;
    for (int i = 0; i < ex.length(); ++i)
        if (ex.loss_mask[static_cast<std::size_t>(i)]) {
            ++supervised;
            CHECK(ex.target_at(i) == 16);
        }
    CHECK(supervised == 1);
}

TEST_CASE("non-cot serialization is minimal") {
    const auto spec = TaskSpec::make(50, 1, 2);
    const auto inst = instance_from_inputs(spec, {3, 4, 5});
    const auto ex = serialize(inst, Regime::NonCoT);
    CHECK(ex.token_ids == std::vector<int>{3, 4, 5, Vocabulary::kAns});
    int supervised = 0;
    for (int i = 0; i < ex.length(); ++i)
        if (ex.loss_mask[static_cast<std::size_t>(i)]) ++supervised;
    CHECK(supervised == 1);
    CHECK(ex.target_at(3) == 16);
}

TEST_CASE("length-1 teacher layout has no trace") {
    const auto spec = TaskSpec::make(50, 1, 1);
    auto rng = Rng::seeded(5);
    const auto inst = generate_instance_len(spec, 1, rng);
    const auto ex = serialize(inst, Regime::Teacher);
    CHECK(ex.length() == 4);  // x EOI ANS answer
    int supervised = 0;
    for (int i = 0; i < ex.length(); ++i)
        if (ex.loss_mask[static_cast<std::size_t>(i)]) {
            ++supervised;
            CHECK(ex.roles[static_cast<std::size_t>(i)] == Role::Ans);
        }
    CHECK(supervised == 1);
}

TEST_CASE("serialization round-trips through value decoding") {
    const auto spec = TaskSpec::make(50, 1, 3);
    auto rng = Rng::seeded(11);
    const auto inst = generate_instance(spec, rng);
    const auto ex = serialize(inst, Regime::Teacher);
    const auto values = decode_values(ex);
    // inputs, then trace s_1..s_{T-1}, then the answer.
    std::vector<std::int64_t> expect = inst.inputs;
    expect.insert(expect.end(), inst.states.begin(), inst.states.end() - 1);
    expect.push_back(inst.answer());
    CHECK(values == expect);
}

TEST_CASE("context length overflow raises a configuration error") {
    const auto spec = TaskSpec::make(50, 1, 2);
    auto rng = Rng::seeded(3);
    const auto inst = generate_instance(spec, rng);
    CHECK_THROWS_AS(serialize(inst, Regime::Student, 6, 8), ConfigError);
}

TEST_CASE("curriculum counts, disjointness, and determinism") {
    const auto spec = TaskSpec::make(50, 1, 1);
    auto rng = Rng::seeded(77);
    const auto cur = make_curriculum(spec, 1, rng);
    CHECK(cur.train_size() == 2);  // lengths 1 and 2, one instance each

    auto rng2 = Rng::seeded(123);
    const auto spec4 = TaskSpec::make(50, 1, 4);
    const auto cur4 = make_curriculum(spec4, 40, rng2, 20);
    CHECK(cur4.groups.size() == 5);
    CHECK(cur4.train_size() == 200);
    CHECK(cur4.test_size() == 100);

    // Token-for-token disjointness via the input tuple.
    for (const auto& g : cur4.groups) {
        std::set<std::vector<std::int64_t>> train_tuples;
        for (const auto& inst : g.train) train_tuples.insert(inst.inputs);
        for (const auto& inst : g.test) CHECK(train_tuples.count(inst.inputs) == 0);
    }

    // Same seed, byte-identical dataset.
    auto rng3 = Rng::seeded(123);
    const auto cur4b = make_curriculum(spec4, 40, rng3, 20);
    for (std::size_t gi = 0; gi < cur4.groups.size(); ++gi)
        for (std::size_t i = 0; i < cur4.groups[gi].train.size(); ++i)
            CHECK(cur4.groups[gi].train[i].inputs == cur4b.groups[gi].train[i].inputs);
}

TEST_CASE("jsonl export and import round-trip") {
    const auto spec = TaskSpec::make(50, 1, 2);
    auto rng = Rng::seeded(21);
    const auto cur = make_curriculum(spec, 5, rng, 2);
    const std::string path = "test_dataset_roundtrip.jsonl";
    write_jsonl(path, cur, Regime::Student, 6);
    const auto examples = read_jsonl(path);
    CHECK(examples.size() == cur.train_size());
    const auto ref = serialize(cur.groups[2].train[0], Regime::Student, 6);
    // Locate the matching line (length-3 group starts after lengths 1-2).
    const auto& got = examples[10];
    CHECK(got.token_ids == ref.token_ids);
    CHECK(got.answer == ref.answer);
    CHECK(got.regime == ref.regime);
    std::remove(path.c_str());
}
