#pragma once

#include "memloom/autodiff.hpp"
#include "memloom/data.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace memloom {

struct Architecture {
    std::size_t input_dim = 32;
    std::size_t hidden_dim = 32;
    std::size_t num_classes = 20;

    bool operator==(const Architecture&) const = default;
};

// Weights of the 2-hidden-layer tanh classifier, stored as
// {W1 [in,h], b1 [h], W2 [h,h], b2 [h], W3 [h,C], b3 [C]}.
class PredictorParams {
public:
    PredictorParams(Architecture arch, ad::ParameterVector tensors);

    static PredictorParams xavier(const Architecture& arch, std::uint64_t seed);
    static PredictorParams zeros(const Architecture& arch);
    static PredictorParams from_flat(const Architecture& arch, std::span<const double> flat);

    const Architecture& arch() const noexcept { return arch_; }
    const ad::ParameterVector& tensors() const noexcept { return tensors_; }
    std::size_t parameter_count() const noexcept;
    std::vector<double> flatten() const;

    bool operator==(const PredictorParams& other) const;

private:
    Architecture arch_;
    ad::ParameterVector tensors_;
};

std::size_t parameter_count(const Architecture& arch) noexcept;

// Log-probabilities [n, C]; params may be tape-recorded.
ad::Tensor log_probs(const ad::ParameterVector& params, const ad::Tensor& inputs);
// Mean negative log-likelihood over the batch.
ad::Tensor batch_loss(const ad::ParameterVector& params, const Batch& batch);

std::vector<double> predict(const PredictorParams& theta, std::span<const double> x);
double task_loss(const PredictorParams& theta, std::span<const double> x, std::size_t y);
std::vector<std::size_t> predict_labels(const ad::ParameterVector& params, const ad::Tensor& inputs);
// Probability assigned to each row's own label.
std::vector<double> label_confidence(const ad::ParameterVector& params, const Batch& batch);

// Frozen Gaussian random projection used as the similarity space for memory.
class KeyNetwork {
public:
    KeyNetwork(std::size_t input_dim, std::size_t key_dim, std::uint64_t seed, bool normalize = false);

    std::vector<double> encode(std::span<const double> x) const;

    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t key_dim() const noexcept { return key_dim_; }
    std::uint64_t seed() const noexcept { return seed_; }
    bool normalize() const noexcept { return normalize_; }

    nlohmann::json to_json() const;
    static KeyNetwork from_json(const nlohmann::json& j);

private:
    KeyNetwork() = default;
    std::size_t input_dim_ = 0;
    std::size_t key_dim_ = 0;
    std::uint64_t seed_ = 0;
    bool normalize_ = false;
    std::vector<double> weights_; // [key_dim, input_dim]
};

struct Checkpoint {
    PredictorParams theta;
    std::uint64_t seed = 0;
    nlohmann::json meta;
};

void save_checkpoint(const std::filesystem::path& path, const PredictorParams& theta, std::uint64_t seed, const nlohmann::json& meta = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

} // namespace memloom
