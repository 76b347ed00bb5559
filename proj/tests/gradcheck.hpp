#pragma once

// Finite-difference checks of the autodiff ops and of the two composed
// training objectives, shared by the unit tests and the acceptance binary.

#include "memloom/adaptation.hpp"
#include "memloom/autodiff.hpp"
#include "memloom/learners.hpp"
#include "memloom/models.hpp"

#include "oracles.hpp"

#include <functional>
#include <random>
#include <string>
#include <vector>

namespace gradcheck {

namespace ad = memloom::ad;

struct OpCase {
    std::string name;
    std::vector<ad::Shape> shapes;
    std::function<ad::Tensor(const std::vector<ad::Tensor>&)> f;
};

inline std::vector<OpCase> op_cases(std::mt19937_64& rng)
{
    std::uniform_int_distribution<std::size_t> dim(1, 4);
    const std::size_t n = dim(rng), m = dim(rng), k = dim(rng);
    std::vector<std::size_t> labels(n);
    std::uniform_int_distribution<std::size_t> lab(0, m - 1);
    for (auto& l : labels) {
        l = lab(rng);
    }
    using T = std::vector<ad::Tensor>;
    return {
        { "matmul", { { n, k }, { k, m } }, [](const T& a) { return ad::matmul(a[0], a[1]); } },
        { "matmul^T", { { k, n }, { m, k } }, [](const T& a) { return ad::matmul(a[0], a[1], true, true); } },
        { "add", { { n, m }, { n, m } }, [](const T& a) { return ad::add(a[0], a[1]); } },
        { "add row", { { n, m }, { m } }, [](const T& a) { return ad::add(a[0], a[1]); } },
        { "add col", { { n, 1 }, { n, m } }, [](const T& a) { return ad::add(a[0], a[1]); } },
        { "add scalar", { { n, m }, {} }, [](const T& a) { return ad::add(a[0], a[1]); } },
        { "mul", { { n, m }, { n, m } }, [](const T& a) { return ad::mul(a[0], a[1]); } },
        { "mul row", { { 1, m }, { n, m } }, [](const T& a) { return ad::mul(a[0], a[1]); } },
        { "mul col", { { n, m }, { n, 1 } }, [](const T& a) { return ad::mul(a[0], a[1]); } },
        { "scale", { { n, m } }, [](const T& a) { return ad::scale(a[0], -1.7); } },
        { "tanh", { { n, m } }, [](const T& a) { return ad::tanh(a[0]); } },
        { "relu", { { n, m } }, [](const T& a) { return ad::relu(a[0]); } },
        { "exp", { { n, m } }, [](const T& a) { return ad::exp(a[0]); } },
        { "log_softmax", { { n, m } }, [](const T& a) { return ad::log_softmax(a[0]); } },
        { "nll", { { n, m } }, [labels](const T& a) { return ad::nll(a[0], labels); } },
        { "nll(log_softmax)", { { n, m } }, [labels](const T& a) { return ad::nll(ad::log_softmax(a[0]), labels); } },
        { "sum", { { n, m } }, [](const T& a) { return ad::sum(a[0]); } },
        { "sum_to row", { { n, m } }, [m](const T& a) { return ad::sum_to(a[0], { m }); } },
        { "sum_to col", { { n, m } }, [n](const T& a) { return ad::sum_to(a[0], { n, 1 }); } },
        { "broadcast_to", { { m } }, [n, m](const T& a) { return ad::broadcast_to(a[0], { n, m }); } },
        { "squared_norm", { { n, m } }, [](const T& a) { return ad::squared_norm(a[0]); } },
        { "sub", { { n, m }, { n, m } }, [](const T& a) { return ad::sub(a[0], a[1]); } },
        { "tanh(x)*exp(y)", { { n, m }, { n, m } }, [](const T& a) { return ad::mul(ad::tanh(a[0]), ad::exp(a[1])); } },
    };
}

inline std::size_t numel(const ad::Shape& s)
{
    std::size_t n = 1;
    for (auto d : s) {
        n *= d;
    }
    return n;
}

struct Check {
    double first_order = 0.0;
    double second_order = 0.0;
};

// Checks d<R, f(x)>/dx against central differences, and the Hessian-vector
// product d<V, grad>/dx against differences of the first-order gradient.
inline Check check_op(const OpCase& c, std::mt19937_64& rng)
{
    std::vector<ad::Tensor> inputs;
    oracle::Vec flat;
    for (const auto& s : c.shapes) {
        auto v = oracle::random_vec(numel(s), rng);
        flat.insert(flat.end(), v.begin(), v.end());
        inputs.emplace_back(s, std::move(v));
    }
    const auto unflatten = [&](const oracle::Vec& x) {
        std::vector<ad::Tensor> out;
        std::size_t off = 0;
        for (const auto& s : c.shapes) {
            const std::size_t n = numel(s);
            out.emplace_back(s, oracle::Vec(x.begin() + off, x.begin() + off + n));
            off += n;
        }
        return out;
    };
    const ad::Tensor probe = c.f(inputs);
    const ad::Tensor weights(probe.shape(), oracle::random_vec(probe.size(), rng));
    const auto objective = [&](const std::vector<ad::Tensor>& xs) { return ad::sum(ad::mul(c.f(xs), weights)); };

    const auto first_grad = [&](const oracle::Vec& x) {
        ad::Tape tape;
        std::vector<ad::Tensor> leaves;
        for (const auto& t : unflatten(x)) {
            leaves.push_back(tape.leaf(t));
        }
        return oracle::flatten(ad::grad(objective(leaves), leaves));
    };

    Check out;
    const auto fd = oracle::finite_difference([&](const oracle::Vec& x) { return objective(unflatten(x)).item(); }, flat);
    out.first_order = oracle::relative_error(first_grad(flat), fd, 1e-6);

    std::vector<ad::Tensor> dirs;
    oracle::Vec dir_flat;
    for (const auto& s : c.shapes) {
        auto v = oracle::random_vec(numel(s), rng);
        dir_flat.insert(dir_flat.end(), v.begin(), v.end());
        dirs.emplace_back(s, std::move(v));
    }
    ad::Tape tape;
    std::vector<ad::Tensor> leaves;
    for (const auto& t : inputs) {
        leaves.push_back(tape.leaf(t));
    }
    const auto g = ad::grad(objective(leaves), leaves, true);
    ad::Tensor gv = ad::Tensor::scalar(0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        gv = ad::add(gv, ad::sum(ad::mul(g[i], dirs[i])));
    }
    const auto hv = gv.on_tape() ? oracle::flatten(ad::grad(gv, leaves)) : oracle::Vec(flat.size(), 0.0);
    const auto hv_fd = oracle::finite_difference(
        [&](const oracle::Vec& x) {
            const auto gx = first_grad(x);
            double s = 0.0;
            for (std::size_t i = 0; i < gx.size(); ++i) {
                s += gx[i] * dir_flat[i];
            }
            return s;
        },
        flat);
    out.second_order = oracle::relative_error(hv, hv_fd, 1e-6);
    return out;
}

// Small classifier (< 200 parameters) with a random neighbour batch.
struct ObjectiveSetup {
    memloom::Architecture arch;
    oracle::Mlp mlp;
    oracle::Vec theta;
    std::vector<oracle::Vec> xs;
    std::vector<std::size_t> ys;
    oracle::Vec qx;
    std::size_t qy = 0;
    double proximal = 0.0;
    double alpha = 0.0;
    std::size_t steps = 1;

    memloom::PredictorParams params(const oracle::Vec& p) const { return memloom::PredictorParams::from_flat(arch, p); }

    memloom::Batch neighbors() const
    {
        std::vector<memloom::Example> ex;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            ex.push_back({ xs[i], ys[i], "" });
        }
        return memloom::make_batch(ex);
    }
};

inline ObjectiveSetup make_setup(std::mt19937_64& rng)
{
    std::uniform_int_distribution<std::size_t> in_d(2, 4), h_d(3, 6), c_d(2, 4), n_d(1, 6), steps_d(1, 2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ObjectiveSetup s;
    s.arch = { in_d(rng), h_d(rng), c_d(rng) };
    s.mlp = { s.arch.input_dim, s.arch.hidden_dim, s.arch.num_classes };
    s.theta = oracle::random_vec(s.mlp.size(), rng, 0.6);
    const std::size_t n = n_d(rng);
    std::uniform_int_distribution<std::size_t> lab(0, s.arch.num_classes - 1);
    for (std::size_t i = 0; i < n; ++i) {
        s.xs.push_back(oracle::random_vec(s.arch.input_dim, rng));
        s.ys.push_back(lab(rng));
    }
    s.qx = oracle::random_vec(s.arch.input_dim, rng);
    s.qy = lab(rng);
    s.proximal = 0.5 * u(rng);
    s.alpha = 0.05 + 0.5 * u(rng);
    s.steps = steps_d(rng);
    return s;
}

// Gradient of the adaptation loss (at a point away from the anchor) against
// the hand-derived gradient and central differences.
inline double check_adaptation_loss(std::mt19937_64& rng)
{
    auto s = make_setup(rng);
    oracle::Vec point = s.theta;
    for (auto& v : point) {
        v += 0.3 * std::normal_distribution<double>(0.0, 1.0)(rng);
    }
    const auto batch = s.neighbors();
    ad::Tape tape;
    const auto leaves = ad::as_leaves(tape, s.params(point).tensors());
    const auto loss = memloom::adaptation_loss(leaves, s.params(s.theta).tensors(), batch, s.proximal);
    const auto g = oracle::flatten(ad::grad(loss, leaves));
    const auto fd = oracle::finite_difference([&](const oracle::Vec& p) { return s.mlp.adaptation_loss(p, s.theta, s.xs, s.ys, s.proximal); }, point);
    const auto hand = s.mlp.adaptation_gradient(point, s.theta, s.xs, s.ys, s.proximal);
    return std::max(oracle::relative_error(g, fd), oracle::relative_error(g, hand));
}

// Second-order gradient of the post-adaptation query loss.
inline double check_meta_gradient(std::mt19937_64& rng)
{
    auto s = make_setup(rng);
    const memloom::Example q { s.qx, s.qy, "" };
    const auto g = oracle::flatten(memloom::meta_example_gradient(s.params(s.theta), q, s.neighbors(), s.alpha, s.steps, s.proximal, false));
    const auto fd = oracle::finite_difference([&](const oracle::Vec& p) { return s.mlp.meta_objective(p, s.qx, s.qy, s.xs, s.ys, s.alpha, s.steps, s.proximal); }, s.theta);
    return oracle::relative_error(g, fd);
}

} // namespace gradcheck
