#pragma once

#include "memloom/data.hpp"
#include "memloom/memory.hpp"
#include "memloom/models.hpp"
#include "memloom/random.hpp"

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace memloom {

enum class AdaptMode { PerExample, Coarse };

std::string_view to_string(AdaptMode mode) noexcept;
AdaptMode parse_adapt_mode(std::string_view name);

struct AdaptConfig {
    // Gradient steps L.
    std::size_t steps = 30;
    // Neighbours / batch size K.
    std::size_t k = 32;
    // Plain gradient-descent rate. BERT-scale runs used 5e-5 (mbpa++) and
    // 1e-5 with Adam; default_config sets the desk-scale value.
    double lr = 0.05;
    // Proximal coefficient lambda_l.
    double proximal = 0.001;
    AdaptMode mode = AdaptMode::PerExample;

    bool operator==(const AdaptConfig&) const = default;
};

void validate(const AdaptConfig& cfg);

// (1/|N|) sum l(f_adapted(x), y) + proximal * ||adapted - anchor||^2
ad::Tensor adaptation_loss(const ad::ParameterVector& adapted, const ad::ParameterVector& anchor, const Batch& neighbors, double proximal);

// One descent step on adaptation_loss starting from `adapted`.
PredictorParams adaptation_step(const PredictorParams& adapted, const PredictorParams& anchor, const Batch& neighbors, const AdaptConfig& cfg);

// L steps on a fixed neighbour batch, anchored at theta.
PredictorParams local_adapt(const PredictorParams& theta, const Batch& neighbors, const AdaptConfig& cfg);

// L steps, each on K examples drawn uniformly from memory. One shared result.
PredictorParams coarse_adapt(const PredictorParams& theta, const EpisodicMemory& mem, const AdaptConfig& cfg, Rng& rng);

struct AdaptedPredictions {
    std::vector<std::size_t> labels;
    // Per-example mode: retrieved memory indices for each query.
    std::vector<std::vector<std::size_t>> neighbors;
    // True when the memory was empty and the unadapted model was used.
    bool fallback = false;
};

// Per-example: retrieve, adapt, predict, discard. Coarse: adapt once, predict all.
AdaptedPredictions predict_with_adaptation(const PredictorParams& theta, const EpisodicMemory& mem, const KeyNetwork& keynet, std::span<const Example> tests, const AdaptConfig& cfg, Rng& rng);

} // namespace memloom
