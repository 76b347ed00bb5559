#pragma once

#include "memloom/data.hpp"
#include "memloom/random.hpp"

#include <json.hpp>

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memloom {

struct MemoryEntry {
    std::vector<double> key;
    std::vector<double> x;
    std::size_t y = 0;
    // Stream position of the stored example.
    std::uint64_t step = 0;

    bool operator==(const MemoryEntry&) const = default;
};

// Append-only key/value store of past examples. kNN is an exact scan.
class EpisodicMemory {
public:
    explicit EpisodicMemory(std::size_t key_dim);

    void append(MemoryEntry entry);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t key_dim() const noexcept { return key_dim_; }
    const MemoryEntry& operator[](std::size_t i) const { return entries_.at(i); }
    const std::vector<MemoryEntry>& entries() const noexcept { return entries_; }

    double squared_distance(std::size_t i, std::span<const double> query) const;
    // +infinity when the memory is empty.
    double min_squared_distance(std::span<const double> query) const;

    // Indices of the min(k, size) closest entries, ascending by squared
    // distance; ties go to the lower write step, then insertion order.
    std::vector<std::size_t> knn(std::span<const double> query, std::size_t k) const;

    // n indices drawn uniformly with replacement.
    std::vector<std::size_t> sample_uniform(std::size_t n, Rng& rng) const;

    Batch batch(std::span<const std::size_t> indices) const;

private:
    std::size_t key_dim_;
    std::vector<MemoryEntry> entries_;
    std::vector<double> keys_; // row-major copy of all keys for scanning
};

enum class PolicyKind { Random, Diversity, Uncertainty, Forgettable };
enum class DiversityRule { Intuitive, Literal };

std::string_view to_string(PolicyKind kind) noexcept;
PolicyKind parse_policy_kind(std::string_view name);
std::string_view to_string(DiversityRule rule) noexcept;
DiversityRule parse_diversity_rule(std::string_view name);

struct WritePolicyConfig {
    PolicyKind kind = PolicyKind::Random;
    // Target fraction of the stream admitted to memory (r_M).
    double rate = 0.01;
    // Diversity scale and rule variant.
    double beta = 10.0;
    DiversityRule rule = DiversityRule::Intuitive;
    // Rescale the diversity score so the realized write rate tracks `rate`.
    // Without it the raw score is used as the write probability.
    bool rate_target = true;
    // Horizon (in examples) of the running statistics used for rate targeting.
    std::size_t window = 1000;
    // Forgettable: stream steps between rechecks of the candidate buffer, and
    // buffer size as a multiple of the target memory size.
    std::size_t recheck_period = 200;
    double candidate_factor = 10.0;

    bool operator==(const WritePolicyConfig&) const = default;
};

// The raw diversity probability from the minimum squared key distance.
// Intuitive: 1 - exp(-d2/beta); literal: exp(-d2/beta). An empty memory
// (d2 = +inf) always gives 1.
double diversity_probability(double d2_min, double beta, DiversityRule rule);

// Write policy with its running state (rate-targeting statistics, confidence
// quantile window, admission quota).
class WritePolicy {
public:
    explicit WritePolicy(WritePolicyConfig config);

    const WritePolicyConfig& config() const noexcept { return config_; }

    // Probability of admitting an example with this key. `confidence` is the
    // predicted probability of the true label; `forget_events` the example's
    // forgetting-event count.
    double write_probability(const EpisodicMemory& mem, std::span<const double> key, double confidence = 1.0, std::size_t forget_events = 0) const;

    // Draws Bernoulli(write_probability), appends on success and updates the
    // running statistics. One uniform draw is consumed per call.
    bool maybe_write(EpisodicMemory& mem, MemoryEntry entry, Rng& rng, double confidence = 1.0, std::size_t forget_events = 0);

    // Stream examples seen so far. Uncertainty and forgettable admissions are
    // capped at rate * steps_seen.
    void set_steps_seen(std::uint64_t steps) noexcept { steps_seen_ = steps; }
    std::uint64_t admitted() const noexcept { return admitted_; }

    // Uncertainty admission threshold given the current window; +inf until the
    // window holds at least one value.
    double confidence_threshold() const;

private:
    double raw_diversity(const EpisodicMemory& mem, std::span<const double> key) const;
    bool within_quota() const noexcept;
    void observe(double raw, double confidence);

    WritePolicyConfig config_;
    double raw_mean_ = 0.0;
    std::size_t raw_seen_ = 0;
    std::deque<double> conf_window_;
    std::multiset<double> conf_sorted_;
    std::uint64_t steps_seen_ = 0;
    std::uint64_t admitted_ = 0;
};

// Candidate buffer for the forgettable policy: tracks how often each example
// is misclassified after having been learned.
class ForgetTracker {
public:
    struct Candidate {
        std::uint64_t id = 0;
        std::vector<double> x;
        std::size_t y = 0;
        bool ever_correct = false;
        std::size_t forget_events = 0;
    };

    explicit ForgetTracker(std::size_t capacity);

    // Adds a candidate, evicting the oldest one when full.
    void add(std::uint64_t id, std::vector<double> x, std::size_t y, bool correct_now);

    // Increments the counter when flag is set; returns the count.
    std::size_t record_forget_event(std::uint64_t id, bool was_correct_now_incorrect);

    // Applies one periodic recheck outcome: a miss on an example that has been
    // correct before counts as a forgetting event. Returns the count.
    std::size_t recheck(std::uint64_t id, bool correct_now);

    void remove(std::uint64_t id);

    std::size_t capacity() const noexcept { return capacity_; }
    const std::deque<Candidate>& candidates() const noexcept { return candidates_; }
    std::size_t forget_events(std::uint64_t id) const;

private:
    Candidate& find(std::uint64_t id);
    const Candidate* find_ptr(std::uint64_t id) const;

    std::size_t capacity_;
    std::deque<Candidate> candidates_;
};

struct MemorySnapshot {
    EpisodicMemory memory;
    nlohmann::json header;
};

// Header line {"format", "key_dim", "policy", "count", ...} followed by one
// JSON object per entry: {"key": [...], "x": [...], "y": int, "step": int}.
void save_memory_snapshot(const std::filesystem::path& path, const EpisodicMemory& mem, const WritePolicyConfig& policy, const nlohmann::json& extra = {});
MemorySnapshot load_memory_snapshot(const std::filesystem::path& path);

nlohmann::json policy_to_json(const WritePolicyConfig& policy);

} // namespace memloom
