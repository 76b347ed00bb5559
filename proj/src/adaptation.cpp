#include "memloom/adaptation.hpp"

#include "memloom/error.hpp"
#include "memloom/log.hpp"

#include <string>

namespace memloom {

std::string_view to_string(AdaptMode mode) noexcept
{
    return mode == AdaptMode::PerExample ? "per-example" : "coarse";
}

AdaptMode parse_adapt_mode(std::string_view name)
{
    if (name == "per-example") return AdaptMode::PerExample;
    if (name == "coarse") return AdaptMode::Coarse;
    throw ConfigError("unknown adaptation mode '" + std::string(name) + "' (expected per-example|coarse)");
}

void validate(const AdaptConfig& cfg)
{
    if (cfg.k == 0) {
        throw ContractError("adaptation K must be >= 1");
    }
    if (!(cfg.lr > 0.0)) {
        throw ContractError("adaptation learning rate must be positive");
    }
    if (!(cfg.proximal >= 0.0)) {
        throw ContractError("proximal coefficient must be non-negative");
    }
}

ad::Tensor adaptation_loss(const ad::ParameterVector& adapted, const ad::ParameterVector& anchor, const Batch& neighbors, double proximal)
{
    ad::Tensor loss = batch_loss(adapted, neighbors);
    if (proximal == 0.0) {
        return loss;
    }
    if (adapted.size() != anchor.size()) {
        throw ContractError("adaptation anchor has a different structure");
    }
    ad::Tensor drift = ad::squared_norm(ad::sub(adapted[0], anchor[0]));
    for (std::size_t i = 1; i < adapted.size(); ++i) {
        drift = ad::add(drift, ad::squared_norm(ad::sub(adapted[i], anchor[i])));
    }
    return ad::add(loss, ad::scale(drift, proximal));
}

PredictorParams adaptation_step(const PredictorParams& adapted, const PredictorParams& anchor, const Batch& neighbors, const AdaptConfig& cfg)
{
    ad::Tape tape;
    const auto leaves = ad::as_leaves(tape, adapted.tensors());
    const auto loss = adaptation_loss(leaves, anchor.tensors(), neighbors, cfg.proximal);
    const auto grads = ad::grad(loss, leaves);
    return { adapted.arch(), ad::apply_update(adapted.tensors(), grads, cfg.lr) };
}

PredictorParams local_adapt(const PredictorParams& theta, const Batch& neighbors, const AdaptConfig& cfg)
{
    validate(cfg);
    if (neighbors.size() == 0) {
        throw ContractError("local adaptation needs at least one neighbour");
    }
    PredictorParams adapted = theta;
    for (std::size_t l = 0; l < cfg.steps; ++l) {
        adapted = adaptation_step(adapted, theta, neighbors, cfg);
    }
    return adapted;
}

PredictorParams coarse_adapt(const PredictorParams& theta, const EpisodicMemory& mem, const AdaptConfig& cfg, Rng& rng)
{
    validate(cfg);
    if (mem.empty()) {
        throw ContractError("coarse adaptation needs a non-empty memory");
    }
    PredictorParams adapted = theta;
    for (std::size_t l = 0; l < cfg.steps; ++l) {
        const auto idx = mem.sample_uniform(cfg.k, rng);
        adapted = adaptation_step(adapted, theta, mem.batch(idx), cfg);
    }
    return adapted;
}

AdaptedPredictions predict_with_adaptation(const PredictorParams& theta, const EpisodicMemory& mem, const KeyNetwork& keynet, std::span<const Example> tests, const AdaptConfig& cfg, Rng& rng)
{
    validate(cfg);
    AdaptedPredictions out;
    if (tests.empty()) {
        return out;
    }
    if (mem.empty()) {
        log::info("memory is empty; predicting without local adaptation");
        out.fallback = true;
        out.labels = predict_labels(theta.tensors(), make_batch(tests).inputs);
        return out;
    }
    if (cfg.mode == AdaptMode::Coarse) {
        const PredictorParams adapted = coarse_adapt(theta, mem, cfg, rng);
        out.labels = predict_labels(adapted.tensors(), make_batch(tests).inputs);
        return out;
    }
    out.labels.reserve(tests.size());
    out.neighbors.reserve(tests.size());
    for (const Example& e : tests) {
        auto idx = mem.knn(keynet.encode(e.x), cfg.k);
        const PredictorParams adapted = local_adapt(theta, mem.batch(idx), cfg);
        out.labels.push_back(predict_labels(adapted.tensors(), single_batch(e.x, e.y).inputs).front());
        out.neighbors.push_back(std::move(idx));
    }
    return out;
}

} // namespace memloom
