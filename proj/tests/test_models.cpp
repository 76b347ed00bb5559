#include "memloom/error.hpp"
#include "memloom/models.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace memloom;

TEST_CASE("parameter count and layout")
{
    const Architecture arch { 3, 5, 4 };
    const auto p = PredictorParams::xavier(arch, 1);
    CHECK(parameter_count(arch) == 3 * 5 + 5 + 5 * 5 + 5 + 5 * 4 + 4);
    CHECK(p.parameter_count() == parameter_count(arch));
    REQUIRE(p.tensors().size() == 6);
    CHECK(p.tensors()[0].shape() == ad::Shape { 3, 5 });
    CHECK(p.tensors()[5].shape() == ad::Shape { 4 });
}

TEST_CASE("xavier init is seeded and bounded")
{
    const Architecture arch { 8, 16, 6 };
    CHECK(PredictorParams::xavier(arch, 3) == PredictorParams::xavier(arch, 3));
    CHECK_FALSE(PredictorParams::xavier(arch, 3) == PredictorParams::xavier(arch, 4));
    const auto p = PredictorParams::xavier(arch, 3);
    const double bound = std::sqrt(6.0 / (8 + 16));
    for (double v : p.tensors()[0].data()) {
        CHECK(std::abs(v) <= bound);
    }
    for (double v : p.tensors()[1].data()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("flatten round-trips")
{
    const Architecture arch { 4, 3, 2 };
    const auto p = PredictorParams::xavier(arch, 9);
    CHECK(PredictorParams::from_flat(arch, p.flatten()) == p);
    std::vector<double> short_flat(5, 0.0);
    CHECK_THROWS_AS(PredictorParams::from_flat(arch, short_flat), ContractError);
}

TEST_CASE("forward pass matches the plain-loop classifier")
{
    std::mt19937_64 rng(5);
    const Architecture arch { 4, 6, 3 };
    const oracle::Mlp mlp { 4, 6, 3 };
    const auto flat = oracle::random_vec(mlp.size(), rng);
    const auto theta = PredictorParams::from_flat(arch, flat);
    for (int i = 0; i < 20; ++i) {
        const auto x = oracle::random_vec(4, rng);
        const auto got = predict(theta, x);
        const auto want = mlp.forward(flat, x).logp;
        REQUIRE(got.size() == 3);
        for (std::size_t c = 0; c < 3; ++c) {
            CHECK(got[c] == doctest::Approx(want[c]).epsilon(1e-12));
        }
        const std::size_t y = static_cast<std::size_t>(i) % 3;
        CHECK(task_loss(theta, x, y) == doctest::Approx(-want[y]).epsilon(1e-12));
    }
}

TEST_CASE("label confidence is the probability of the true label")
{
    const Architecture arch { 2, 3, 3 };
    const auto theta = PredictorParams::xavier(arch, 2);
    const std::vector<Example> ex { { { 0.5, -1.0 }, 2, "t" }, { { 1.0, 1.0 }, 0, "t" } };
    const auto b = make_batch(ex);
    const auto conf = label_confidence(theta.tensors(), b);
    REQUIRE(conf.size() == 2);
    CHECK(conf[0] == doctest::Approx(std::exp(predict(theta, ex[0].x)[2])));
    CHECK(conf[1] == doctest::Approx(std::exp(predict(theta, ex[1].x)[0])));
}

TEST_CASE("key network is frozen, seeded and optionally normalized")
{
    const KeyNetwork k(6, 3, 42);
    const std::vector<double> x { 1, 2, 3, 4, 5, 6 };
    CHECK(k.encode(x) == KeyNetwork(6, 3, 42).encode(x));
    CHECK(k.encode(x) != KeyNetwork(6, 3, 43).encode(x));
    CHECK(k.encode(x).size() == 3);

    const KeyNetwork n(6, 3, 42, true);
    double norm = 0.0;
    for (double v : n.encode(x)) {
        norm += v * v;
    }
    CHECK(norm == doctest::Approx(1.0));

    const auto back = KeyNetwork::from_json(k.to_json());
    CHECK(back.encode(x) == k.encode(x));
    CHECK_THROWS_AS(k.encode(std::vector<double>(5, 0.0)), ContractError);
}

TEST_CASE("checkpoint round-trip is exact")
{
    const Architecture arch { 5, 4, 3 };
    const auto p = PredictorParams::xavier(arch, 77);
    const auto path = std::filesystem::temp_directory_path() / "memloom_test_ckpt.json";
    save_checkpoint(path, p, 77, { { "note", "x" } });
    const auto back = load_checkpoint(path);
    CHECK(back.theta == p);
    CHECK(back.seed == 77);
    CHECK(back.meta.at("note") == "x");
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path));
}
