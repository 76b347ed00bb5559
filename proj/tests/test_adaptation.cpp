#include "memloom/adaptation.hpp"
#include "memloom/error.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <random>

using namespace memloom;

namespace {

struct Fixture {
    Architecture arch { 3, 5, 3 };
    oracle::Mlp mlp { 3, 5, 3 };
    std::mt19937_64 rng { 21 };
    PredictorParams theta = PredictorParams::xavier(arch, 4);
    KeyNetwork keys { 3, 2, 8 };
    EpisodicMemory mem { 2 };
    std::vector<Example> tests;

    Fixture()
    {
        for (std::size_t i = 0; i < 40; ++i) {
            auto x = oracle::random_vec(3, rng);
            mem.append({ keys.encode(x), x, i % 3, i + 1 });
        }
        for (std::size_t i = 0; i < 6; ++i) {
            tests.push_back({ oracle::random_vec(3, rng), i % 3, "t" });
        }
    }
};

} // namespace

TEST_CASE("local adaptation follows plain gradient descent on the adaptation loss")
{
    Fixture f;
    std::vector<Example> nb;
    std::vector<oracle::Vec> xs;
    std::vector<std::size_t> ys;
    for (std::size_t i = 0; i < 5; ++i) {
        nb.push_back({ f.mem[i].x, f.mem[i].y, "" });
        xs.push_back(f.mem[i].x);
        ys.push_back(f.mem[i].y);
    }
    AdaptConfig cfg;
    cfg.steps = 4;
    cfg.lr = 0.2;
    cfg.proximal = 0.05;
    const auto got = local_adapt(f.theta, make_batch(nb), cfg).flatten();

    const auto anchor = f.theta.flatten();
    auto want = anchor;
    for (std::size_t s = 0; s < cfg.steps; ++s) {
        const auto g = f.mlp.adaptation_gradient(want, anchor, xs, ys, cfg.proximal);
        for (std::size_t i = 0; i < want.size(); ++i) {
            want[i] -= cfg.lr * g[i];
        }
    }
    CHECK(oracle::relative_error(got, want) < 1e-12);
}

TEST_CASE("zero adaptation steps leave the parameters unchanged")
{
    Fixture f;
    AdaptConfig cfg;
    cfg.steps = 0;
    cfg.k = 4;
    CHECK(local_adapt(f.theta, f.mem.batch(std::vector<std::size_t> { 0, 1 }), cfg) == f.theta);
    Rng rng(1);
    CHECK(coarse_adapt(f.theta, f.mem, cfg, rng) == f.theta);

    for (auto mode : { AdaptMode::PerExample, AdaptMode::Coarse }) {
        cfg.mode = mode;
        Rng r(2);
        const auto adapted = predict_with_adaptation(f.theta, f.mem, f.keys, f.tests, cfg, r);
        CHECK(adapted.labels == predict_labels(f.theta.tensors(), make_batch(f.tests).inputs));
    }
}

TEST_CASE("per-example adaptation retrieves the k nearest keys")
{
    Fixture f;
    AdaptConfig cfg;
    cfg.steps = 2;
    cfg.k = 7;
    Rng rng(3);
    const auto out = predict_with_adaptation(f.theta, f.mem, f.keys, f.tests, cfg, rng);
    REQUIRE(out.neighbors.size() == f.tests.size());
    CHECK_FALSE(out.fallback);
    for (std::size_t i = 0; i < f.tests.size(); ++i) {
        CHECK(out.neighbors[i] == oracle::knn(f.mem.entries(), f.keys.encode(f.tests[i].x), 7));
        const auto adapted = local_adapt(f.theta, f.mem.batch(out.neighbors[i]), cfg);
        CHECK(out.labels[i] == predict_labels(adapted.tensors(), make_batch(std::span(&f.tests[i], 1)).inputs)[0]);
    }
}

TEST_CASE("coarse adaptation is one shared, seeded adaptation")
{
    Fixture f;
    AdaptConfig cfg;
    cfg.steps = 3;
    cfg.k = 8;
    cfg.mode = AdaptMode::Coarse;
    Rng a(5), b(5);
    const auto pa = coarse_adapt(f.theta, f.mem, cfg, a);
    CHECK(pa == coarse_adapt(f.theta, f.mem, cfg, b));
    CHECK_FALSE(pa == f.theta);
    Rng c(5);
    const auto out = predict_with_adaptation(f.theta, f.mem, f.keys, f.tests, cfg, c);
    CHECK(out.labels == predict_labels(pa.tensors(), make_batch(f.tests).inputs));
    CHECK(out.neighbors.empty());
}

TEST_CASE("empty memory falls back to the unadapted model")
{
    Fixture f;
    EpisodicMemory empty(2);
    AdaptConfig cfg;
    for (auto mode : { AdaptMode::PerExample, AdaptMode::Coarse }) {
        cfg.mode = mode;
        Rng rng(1);
        const auto out = predict_with_adaptation(f.theta, empty, f.keys, f.tests, cfg, rng);
        CHECK(out.fallback);
        CHECK(out.labels == predict_labels(f.theta.tensors(), make_batch(f.tests).inputs));
    }
}

TEST_CASE("adaptation config validation")
{
    AdaptConfig cfg;
    CHECK_NOTHROW(validate(cfg));
    cfg.k = 0;
    CHECK_THROWS(validate(cfg));
    cfg = {};
    cfg.lr = -1.0;
    CHECK_THROWS(validate(cfg));
    cfg = {};
    cfg.proximal = -0.1;
    CHECK_THROWS(validate(cfg));
    CHECK(parse_adapt_mode("coarse") == AdaptMode::Coarse);
    CHECK_THROWS_AS(parse_adapt_mode("batch"), ConfigError);
}
