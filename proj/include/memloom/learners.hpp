#pragma once

#include "memloom/adaptation.hpp"
#include "memloom/data.hpp"
#include "memloom/memory.hpp"
#include "memloom/models.hpp"
#include "memloom/random.hpp"
#include "memloom/taskgen.hpp"

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace memloom {

// Mtl is the jointly-shuffled multi-task oracle, not a lifelong learner.
enum class Variant { EncDec, Replay, Mbpa, MetaMbpa, Mtl };

std::string_view to_string(Variant v) noexcept;
Variant parse_variant(std::string_view name);
// Selection rule each variant uses unless told otherwise: diversity for
// meta-mbpa, random for the rest.
PolicyKind default_policy(Variant v) noexcept;
bool uses_memory(Variant v) noexcept;

struct AdamConfig {
    double base_lr = 3e-5;
    double multiplier = 100.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    double lr() const noexcept { return base_lr * multiplier; }
    bool operator==(const AdamConfig&) const = default;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {});

    // Bias-corrected step; returns the updated (detached) parameters.
    ad::ParameterVector step(const ad::ParameterVector& params, const ad::ParameterVector& grads);

    std::uint64_t steps() const noexcept { return t_; }
    const AdamConfig& config() const noexcept { return cfg_; }

private:
    AdamConfig cfg_;
    std::uint64_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

struct LearnerConfig {
    Variant variant = Variant::MetaMbpa;
    // Stream steps between replay events, and examples per replay event.
    std::size_t n_tr = 200;
    std::size_t n_re = 32;
    // Stream examples per task / meta-task update.
    std::size_t batch_size = 16;
    AdamConfig adam;
    // Rate of the simulated adaptation step inside the meta objectives
    // (1e-5 at BERT scale).
    double inner_lr = 0.05;
    std::size_t inner_steps = 1;
    bool first_order = false;
    // Meta-mbpa ablations: train with plain task/replay losses ("w/o meta"),
    // or skip test-time adaptation ("w/o LA", also honoured by mbpa++).
    bool meta_objective = true;
    bool adapt_eval = true;
    AdaptConfig adapt;
    WritePolicyConfig policy;
    std::size_t key_dim = 8;
    bool normalize_keys = false;

    bool operator==(const LearnerConfig&) const = default;
};

void validate(const LearnerConfig& cfg);

// Defaults for a variant: its selection rule and test-time adaptation mode
// (per-example for mbpa++, coarse for meta-mbpa).
LearnerConfig default_config(Variant v);

struct ReplayEvent {
    std::uint64_t step = 0;
    std::size_t memory_size = 0;
    bool skipped = false;
};

struct LearnerState {
    PredictorParams theta;
    EpisodicMemory memory;
    std::uint64_t step = 0;
    Adam optimizer;
    std::vector<ReplayEvent> replay_events;
    std::uint64_t updates = 0;
    // Meta updates whose neighbour set contained the query example itself.
    std::uint64_t self_neighbor_hits = 0;
};

struct TaskEvaluation {
    std::vector<std::size_t> predictions;
    double accuracy = 0.0;
    // Per query, memory indices used for adaptation (per-example mode only).
    std::vector<std::vector<std::size_t>> neighbors;
};

struct Evaluation {
    // In test-set order.
    std::vector<TaskEvaluation> tasks;
    bool fallback = false;
};

class Learner {
public:
    // Xavier init and key network both derived from `seed`.
    Learner(LearnerConfig cfg, const Architecture& arch, std::uint64_t seed);
    Learner(LearnerConfig cfg, PredictorParams init, KeyNetwork keys, std::uint64_t seed);

    const LearnerConfig& config() const noexcept { return cfg_; }
    const LearnerState& state() const noexcept { return state_; }
    const KeyNetwork& keys() const noexcept { return keys_; }
    const WritePolicy& policy() const noexcept { return policy_; }
    std::uint64_t seed() const noexcept { return seed_; }

    // Replaces parameters and memory (used when evaluating saved artifacts).
    void restore(PredictorParams theta, EpisodicMemory memory);

    // One Adam step on the mean task loss.
    void task_update(const Batch& batch);
    // One Adam step on n_re uniform memory samples.
    void replay_update();
    // Gradient of the post-adaptation loss, one Adam step.
    void meta_task_update(std::span<const Example> batch);
    void meta_replay_update();

    // Called after the update covering each step in `at` (stream positions).
    struct Observer {
        std::vector<std::uint64_t> at;
        std::function<void(std::uint64_t, const Learner&)> callback;
    };

    void train_stream(const TaskStream& stream, const Observer& observer = {});

    // Runs the variant's evaluation mode; adaptation randomness is re-derived
    // from the seed on every call.
    Evaluation evaluate(std::span<const TestSet> tests) const;
    Evaluation evaluate(std::span<const TestSet> tests, const AdaptConfig& adapt, bool adapt_eval) const;

private:
    bool meta_training() const noexcept;
    void adam_step(const ad::ParameterVector& grads);
    ad::ParameterVector meta_gradient(std::span<const Example* const> batch);
    void write_pending(std::span<const Example* const> pending, std::uint64_t first_step);
    void recheck_candidates();

    LearnerConfig cfg_;
    std::uint64_t seed_;
    KeyNetwork keys_;
    LearnerState state_;
    WritePolicy policy_;
    Rng policy_rng_;
    Rng replay_rng_;
    std::optional<ForgetTracker> tracker_;
};

// Plain gradient of the mean task loss (detached).
ad::ParameterVector task_gradient(const PredictorParams& theta, const Batch& batch);

// Gradient w.r.t. theta of l(f_adapted(x), y) where adapted follows
// `inner_steps` descent steps of the adaptation loss on `neighbors`.
ad::ParameterVector meta_example_gradient(const PredictorParams& theta, const Example& query, const Batch& neighbors, double inner_lr, std::size_t inner_steps, double proximal, bool first_order);

} // namespace memloom
