#include "memloom/error.hpp"
#include "memloom/eval.hpp"
#include "memloom/learners.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>

using namespace memloom;

namespace {

struct Small {
    SuiteConfig suite;
    std::vector<TaskSpec> specs;
    GeneratedData data;
    Architecture arch;

    explicit Small(std::uint64_t seed = 3, std::size_t n_train = 200)
    {
        suite.n_tasks = 3;
        suite.classes_per_task = 2;
        suite.dim = 8;
        suite.n_train = n_train;
        suite.n_test = 40;
        suite.seed = seed;
        specs = make_suite(suite);
        const auto order = canonical_ordering(specs, "i");
        data = generate_stream(specs, order, seed);
        arch = { suite.dim, 12, total_classes(specs) };
    }
};

LearnerConfig small_config(Variant v)
{
    auto cfg = default_config(v);
    cfg.n_tr = 50;
    cfg.n_re = 8;
    cfg.batch_size = 8;
    cfg.policy.rate = 0.1;
    cfg.adapt.steps = 3;
    cfg.adapt.k = 8;
    return cfg;
}

} // namespace

TEST_CASE("variant names and defaults")
{
    for (auto v : { Variant::EncDec, Variant::Replay, Variant::Mbpa, Variant::MetaMbpa, Variant::Mtl }) {
        CHECK(parse_variant(to_string(v)) == v);
    }
    CHECK_THROWS_AS(parse_variant("maml"), ConfigError);
    CHECK(default_policy(Variant::MetaMbpa) == PolicyKind::Diversity);
    CHECK(default_policy(Variant::Mbpa) == PolicyKind::Random);
    CHECK(default_config(Variant::MetaMbpa).adapt.mode == AdaptMode::Coarse);
    CHECK(default_config(Variant::Mbpa).adapt.mode == AdaptMode::PerExample);
    CHECK_FALSE(uses_memory(Variant::EncDec));
    CHECK_FALSE(uses_memory(Variant::Mtl));
    CHECK(uses_memory(Variant::Replay));
    CHECK(default_config(Variant::EncDec).adam.lr() == doctest::Approx(3e-3));
}

TEST_CASE("adam matches the bias-corrected update")
{
    const ad::ParameterVector p { ad::Tensor::vector({ 1.0, -1.0 }) };
    const ad::ParameterVector g { ad::Tensor::vector({ 0.5, -2.0 }) };
    AdamConfig cfg;
    Adam opt(cfg);
    auto q = opt.step(p, g);
    // First step moves each coordinate by lr * sign(g) (up to eps).
    CHECK(q[0][0] == doctest::Approx(1.0 - cfg.lr()).epsilon(1e-9));
    CHECK(q[0][1] == doctest::Approx(-1.0 + cfg.lr()).epsilon(1e-9));
    q = opt.step(q, g);
    CHECK(opt.steps() == 2);
    CHECK(q[0][0] == doctest::Approx(1.0 - 2 * cfg.lr()).epsilon(1e-9));
}

TEST_CASE("task update equals one adam step on the plain gradient")
{
    Small s;
    Learner l(small_config(Variant::EncDec), s.arch, 1);
    const auto theta0 = l.state().theta;
    const std::span<const Example> first(s.data.stream.examples.data(), 8);
    const auto batch = make_batch(first);
    Adam opt(l.config().adam);
    const auto want = opt.step(theta0.tensors(), task_gradient(theta0, batch));
    l.task_update(batch);
    CHECK(l.state().theta == PredictorParams(s.arch, want));
}

TEST_CASE("task gradient matches the hand-derived gradient")
{
    Small s;
    const auto theta = PredictorParams::xavier(s.arch, 2);
    const std::span<const Example> first(s.data.stream.examples.data(), 6);
    oracle::Mlp mlp { s.arch.input_dim, s.arch.hidden_dim, s.arch.num_classes };
    std::vector<oracle::Vec> xs;
    std::vector<std::size_t> ys;
    for (const auto& e : first) {
        xs.push_back(e.x);
        ys.push_back(e.y);
    }
    const auto got = oracle::flatten(task_gradient(theta, make_batch(first)));
    CHECK(oracle::relative_error(got, mlp.gradient(theta.flatten(), xs, ys)) < 1e-10);
}

TEST_CASE("replay schedule for a long stream")
{
    SuiteConfig sc;
    sc.n_tasks = 5;
    sc.classes_per_task = 2;
    sc.dim = 4;
    sc.n_train = 5000;
    sc.n_test = 1;
    const auto specs = make_suite(sc);
    const auto data = generate_stream(specs, canonical_ordering(specs, "i"), 1);
    REQUIRE(data.stream.size() == 25000);
    auto cfg = default_config(Variant::Replay);
    cfg.n_tr = 10000;
    cfg.batch_size = 64;
    Learner l(cfg, { 4, 8, total_classes(specs) }, 5);
    l.train_stream(data.stream);
    REQUIRE(l.state().replay_events.size() == 2);
    CHECK(l.state().replay_events[0].step == 10000);
    CHECK(l.state().replay_events[1].step == 20000);
    CHECK_FALSE(l.state().replay_events[0].skipped);
}

TEST_CASE("replay bookkeeping follows the scripted order over 100 steps")
{
    Small s(4, 34);
    TaskStream stream = s.data.stream;
    stream.examples.resize(100);
    auto cfg = small_config(Variant::Replay);
    cfg.n_tr = 10;
    cfg.batch_size = 4;
    cfg.policy.rate = 0.3;
    Learner l(cfg, s.arch, 9);
    l.train_stream(stream);

    // Flushes happen when the batch fills, at every replay step, and at the end.
    std::vector<std::uint64_t> flushes;
    std::size_t pending = 0;
    for (std::uint64_t t = 1; t <= 100; ++t) {
        ++pending;
        if (pending == 4 || t % 10 == 0 || t == 100) {
            flushes.push_back(t);
            pending = 0;
        }
    }
    const auto& mem = l.state().memory;
    const auto& events = l.state().replay_events;
    REQUIRE(events.size() == 10);
    for (std::size_t i = 0; i < events.size(); ++i) {
        const std::uint64_t t = 10 * (i + 1);
        CHECK(events[i].step == t);
        // Writes of the current batch land after its update and replay.
        const auto flush = std::find(flushes.begin(), flushes.end(), t);
        REQUIRE(flush != flushes.end());
        const std::uint64_t prev = flush == flushes.begin() ? 0 : *(flush - 1);
        const auto before = static_cast<std::size_t>(std::count_if(mem.entries().begin(), mem.entries().end(), [&](const MemoryEntry& e) { return e.step <= prev; }));
        CHECK(events[i].memory_size == before);
        CHECK(events[i].skipped == (before == 0));
    }
    CHECK(l.state().updates == flushes.size() + std::count_if(events.begin(), events.end(), [](const ReplayEvent& e) { return !e.skipped; }));
    for (const auto& e : mem.entries()) {
        const auto& src = stream.examples.at(e.step - 1);
        CHECK(e.x == src.x);
        CHECK(e.y == src.y);
        CHECK(e.key == l.keys().encode(src.x));
    }
    CHECK(std::is_sorted(mem.entries().begin(), mem.entries().end(), [](const MemoryEntry& a, const MemoryEntry& b) { return a.step < b.step; }));
}

TEST_CASE("zero inner rate makes the meta update a task update")
{
    Small s;
    auto cfg = small_config(Variant::MetaMbpa);
    cfg.inner_lr = 0.0;
    Learner meta(cfg, s.arch, 2);
    meta.train_stream(s.data.stream);
    REQUIRE_FALSE(meta.state().memory.empty());
    Learner plain = meta;
    const std::span<const Example> batch(s.data.stream.examples.data(), 8);
    meta.meta_task_update(batch);
    plain.task_update(make_batch(batch));
    CHECK(meta.state().theta == plain.state().theta);
}

TEST_CASE("empty memory makes meta-mbpa behave as enc-dec")
{
    Small s;
    auto meta_cfg = small_config(Variant::MetaMbpa);
    meta_cfg.policy.rate = 0.0;
    meta_cfg.policy.kind = PolicyKind::Random;
    Learner meta(meta_cfg, s.arch, 6);
    Learner enc(small_config(Variant::EncDec), s.arch, 6);
    meta.train_stream(s.data.stream);
    enc.train_stream(s.data.stream);
    CHECK(meta.state().memory.empty());
    CHECK(meta.state().theta == enc.state().theta);
    const auto a = meta.evaluate(s.data.tests);
    const auto b = enc.evaluate(s.data.tests);
    CHECK(a.fallback);
    for (std::size_t i = 0; i < a.tasks.size(); ++i) {
        CHECK(a.tasks[i].predictions == b.tasks[i].predictions);
    }
}

TEST_CASE("training is deterministic for a seed")
{
    Small s;
    for (auto v : { Variant::Replay, Variant::MetaMbpa }) {
        auto cfg = small_config(v);
        Learner a(cfg, s.arch, 11), b(cfg, s.arch, 11), c(cfg, s.arch, 12);
        a.train_stream(s.data.stream);
        b.train_stream(s.data.stream);
        c.train_stream(s.data.stream);
        CHECK(a.state().theta == b.state().theta);
        CHECK(a.state().memory.entries() == b.state().memory.entries());
        CHECK_FALSE(a.state().theta == c.state().theta);
        const auto ea = a.evaluate(s.data.tests);
        const auto eb = b.evaluate(s.data.tests);
        CHECK(ea.tasks[0].predictions == eb.tasks[0].predictions);
    }
}

TEST_CASE("mtl never replays")
{
    Small s;
    Learner l(small_config(Variant::Mtl), s.arch, 1);
    l.train_stream(shuffled_jointly(s.data.stream, 1));
    CHECK(l.state().replay_events.empty());
    CHECK(l.state().memory.empty());
}

TEST_CASE("observer fires at task boundaries")
{
    Small s;
    Learner l(small_config(Variant::Replay), s.arch, 1);
    const auto stages = train_with_checkpoints(l, s.data.stream);
    REQUIRE(stages.size() == 4);
    CHECK(stages[0].state().step == 0);
    CHECK(stages[1].state().step == 200);
    CHECK(stages[3].state().theta == l.state().theta);
}

TEST_CASE("non-finite loss aborts with the step number")
{
    Small s;
    TaskStream bad = s.data.stream;
    bad.examples[20].x[0] = std::numeric_limits<double>::infinity();
    Learner l(small_config(Variant::EncDec), s.arch, 1);
    try {
        l.train_stream(bad);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("at stream step 24") != std::string::npos);
    }
}

TEST_CASE("learner config validation")
{
    auto cfg = default_config(Variant::Replay);
    CHECK_NOTHROW(validate(cfg));
    cfg.n_tr = 0;
    CHECK_THROWS(validate(cfg));
    cfg = default_config(Variant::Replay);
    cfg.policy.rate = 1.5;
    CHECK_THROWS(validate(cfg));
}
