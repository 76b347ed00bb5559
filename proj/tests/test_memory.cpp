#include "memloom/error.hpp"
#include "memloom/memory.hpp"

#include "oracles.hpp"
#include "policy_sim.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>

using namespace memloom;

namespace {

EpisodicMemory random_memory(std::size_t n, std::size_t dim, std::mt19937_64& rng, bool coarse = false)
{
    EpisodicMemory m(dim);
    std::uniform_int_distribution<int> grid(-2, 2);
    for (std::size_t i = 0; i < n; ++i) {
        MemoryEntry e;
        if (coarse) {
            // Integer grid: many exact distance ties.
            for (std::size_t j = 0; j < dim; ++j) {
                e.key.push_back(grid(rng));
            }
        } else {
            e.key = oracle::random_vec(dim, rng);
        }
        e.x = e.key;
        e.y = i % 3;
        e.step = (i * 7919) % (n + 3) + 1;
        m.append(std::move(e));
    }
    return m;
}

} // namespace

TEST_CASE("knn agrees with a full-scan sort")
{
    std::mt19937_64 rng(1);
    for (bool coarse : { false, true }) {
        const auto m = random_memory(400, 3, rng, coarse);
        for (int q = 0; q < 100; ++q) {
            std::vector<double> query;
            if (coarse) {
                std::uniform_int_distribution<int> g(-2, 2);
                query = { double(g(rng)), double(g(rng)), double(g(rng)) };
            } else {
                query = oracle::random_vec(3, rng);
            }
            CHECK(m.knn(query, 16) == oracle::knn(m.entries(), query, 16));
        }
    }
}

TEST_CASE("knn edge cases")
{
    EpisodicMemory m(2);
    CHECK(m.knn(std::vector<double> { 0, 0 }, 5).empty());
    CHECK(m.min_squared_distance(std::vector<double> { 0, 0 }) == std::numeric_limits<double>::infinity());
    m.append({ { 1, 0 }, { 1, 0 }, 0, 5 });
    m.append({ { -1, 0 }, { -1, 0 }, 1, 2 });
    m.append({ { 3, 0 }, { 3, 0 }, 1, 1 });
    // Equal distance: the lower step wins.
    CHECK(m.knn(std::vector<double> { 0, 0 }, 10) == std::vector<std::size_t> { 1, 0, 2 });
    CHECK(m.knn(std::vector<double> { 0, 0 }, 1) == std::vector<std::size_t> { 1 });
    CHECK(m.min_squared_distance(std::vector<double> { 0, 0 }) == 1.0);
    CHECK_THROWS_AS(m.append({ { 1, 2, 3 }, {}, 0, 1 }), ContractError);
    CHECK_THROWS_AS(m.knn(std::vector<double> { 0 }, 1), ContractError);
}

TEST_CASE("uniform replay sampling passes a chi-square test")
{
    std::mt19937_64 rng(3);
    const auto m = random_memory(10, 2, rng);
    Rng r = make_rng(5, "replay");
    std::vector<double> counts(10, 0.0);
    const std::size_t n = 100000;
    for (auto i : m.sample_uniform(n, r)) {
        counts.at(i) += 1.0;
    }
    double chi2 = 0.0;
    for (double c : counts) {
        chi2 += (c - n / 10.0) * (c - n / 10.0) / (n / 10.0);
    }
    // 99.9th percentile of chi-square with 9 degrees of freedom.
    CHECK(chi2 < 27.88);
}

TEST_CASE("memory batch stacks the stored inputs")
{
    EpisodicMemory m(1);
    m.append({ { 0.0 }, { 1.0, 2.0 }, 1, 1 });
    m.append({ { 1.0 }, { 3.0, 4.0 }, 0, 2 });
    const std::vector<std::size_t> idx { 1, 0, 1 };
    const auto b = m.batch(idx);
    CHECK(b.labels == std::vector<std::size_t> { 0, 1, 0 });
    CHECK(b.inputs.shape() == ad::Shape { 3, 2 });
    CHECK(b.inputs[0] == 3.0);
}

TEST_CASE("diversity probability rules")
{
    CHECK(diversity_probability(0.0, 10.0, DiversityRule::Intuitive) == 0.0);
    CHECK(diversity_probability(10.0, 10.0, DiversityRule::Intuitive) == doctest::Approx(1.0 - std::exp(-1.0)));
    CHECK(diversity_probability(10.0, 10.0, DiversityRule::Literal) == doctest::Approx(std::exp(-1.0)));
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(diversity_probability(inf, 10.0, DiversityRule::Intuitive) == 1.0);
    CHECK(diversity_probability(inf, 10.0, DiversityRule::Literal) == 1.0);
}

TEST_CASE("random policy lands within binomial bounds")
{
    WritePolicyConfig cfg;
    cfg.kind = PolicyKind::Random;
    cfg.rate = 0.01;
    const auto out = policy_sim::simulate(cfg, 20000, 0, 9);
    const auto [lo, hi] = oracle::binomial_3sigma(20000, 0.01);
    CHECK(out.written >= lo);
    CHECK(out.written <= hi);
}

TEST_CASE("rate-targeted diversity tracks the memory rate")
{
    WritePolicyConfig cfg;
    cfg.kind = PolicyKind::Diversity;
    cfg.rate = 0.05;
    const auto out = policy_sim::simulate(cfg, 20000, 2000, 4);
    CHECK(out.rate_after_warmup() == doctest::Approx(0.05).epsilon(0.25));
}

TEST_CASE("uncertainty admits the least confident fraction")
{
    WritePolicyConfig cfg;
    cfg.kind = PolicyKind::Uncertainty;
    cfg.rate = 0.1;
    WritePolicy p(cfg);
    EpisodicMemory m(1);
    Rng rng(1);
    CHECK(p.confidence_threshold() == std::numeric_limits<double>::infinity());
    for (int i = 0; i < 1000; ++i) {
        p.set_steps_seen(std::uint64_t(i + 1));
        p.maybe_write(m, { { 0.0 }, { 0.0 }, 0, std::uint64_t(i + 1) }, rng, (i % 100) / 100.0);
    }
    CHECK(p.admitted() <= 100);
    CHECK(p.confidence_threshold() == doctest::Approx(0.1).epsilon(0.05));
    p.set_steps_seen(2000);
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 0.05) == 1.0);
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 0.5) == 0.0);
    // Confident or not, nothing beyond rate * steps_seen.
    p.set_steps_seen(p.admitted());
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 0.05) == 0.0);

    const auto out = policy_sim::simulate(cfg, 20000, 1000, 8);
    CHECK(out.rate_after_warmup() == doctest::Approx(0.1).epsilon(0.25));
}

TEST_CASE("forgettable policy needs a forgetting event and a free quota")
{
    WritePolicyConfig cfg;
    cfg.kind = PolicyKind::Forgettable;
    cfg.rate = 0.01;
    WritePolicy p(cfg);
    EpisodicMemory m(1);
    p.set_steps_seen(50);
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 1.0, 3) == 0.0);
    p.set_steps_seen(100);
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 1.0, 0) == 0.0);
    CHECK(p.write_probability(m, std::vector<double> { 0.0 }, 1.0, 1) == 1.0);

    const auto out = policy_sim::simulate(cfg, 20000, 1000, 8);
    CHECK(out.rate_after_warmup() == doctest::Approx(0.01).epsilon(0.25));
}

TEST_CASE("forget tracker counts misses after a correct check")
{
    ForgetTracker t(2);
    t.add(1, { 0.0 }, 0, false);
    CHECK(t.recheck(1, false) == 0); // never learned yet
    CHECK(t.recheck(1, true) == 0);
    CHECK(t.recheck(1, false) == 1);
    CHECK(t.recheck(1, false) == 2); // still counts: it was correct before
    CHECK(t.record_forget_event(1, true) == 3);
    t.add(2, { 0.0 }, 0, true);
    t.add(3, { 0.0 }, 0, true); // evicts 1
    CHECK(t.candidates().size() == 2);
    CHECK(t.candidates().front().id == 2);
    t.remove(2);
    CHECK(t.candidates().size() == 1);
}

TEST_CASE("memory snapshot round-trip")
{
    std::mt19937_64 rng(12);
    const auto m = random_memory(50, 4, rng);
    WritePolicyConfig cfg;
    cfg.kind = PolicyKind::Diversity;
    const auto path = std::filesystem::temp_directory_path() / "memloom_test_memory.jsonl";
    save_memory_snapshot(path, m, cfg, { { "tag", 1 } });
    const auto snap = load_memory_snapshot(path);
    CHECK(snap.memory.entries() == m.entries());
    CHECK(snap.header.at("count") == 50);
    CHECK(snap.header.at("policy").at("name") == "diversity");
    std::filesystem::remove(path);
}

TEST_CASE("policy names parse")
{
    CHECK(parse_policy_kind("forgettable") == PolicyKind::Forgettable);
    CHECK(to_string(PolicyKind::Uncertainty) == "uncertainty");
    CHECK(parse_diversity_rule("literal") == DiversityRule::Literal);
    CHECK_THROWS_AS(parse_policy_kind("greedy"), ConfigError);
}
