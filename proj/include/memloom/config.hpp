#pragma once

#include "memloom/learners.hpp"
#include "memloom/taskgen.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

namespace memloom {

struct AnalysisToggles {
    bool forgetting_curve = true;
    bool neighbor_matrix = true;
    // Wall-clock numbers are the one report that is not reproducible bit for bit.
    bool timing = false;
    // Off: every variant predicts with the trained parameters directly.
    bool adapt_eval = true;

    bool operator==(const AnalysisToggles&) const = default;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::string ordering = "i";
    std::filesystem::path output = "run";
    SuiteConfig suite;
    std::size_t hidden_dim = 32;
    LearnerConfig learner;
    AnalysisToggles analysis;

    bool operator==(const RunConfig&) const = default;
};

// Command-line overrides; unset members leave file/default values alone.
struct Overrides {
    std::optional<std::string> variant;
    std::optional<std::string> policy;
    std::optional<double> memory_rate;
    std::optional<std::string> ordering;
    std::optional<std::uint64_t> seed;
    std::optional<std::filesystem::path> output;
    std::optional<std::string> diversity_rule;
    bool first_order = false;
    bool no_adapt_eval = false;
};

// Defaults for a variant as a full JSON document.
nlohmann::json default_config_json(Variant variant);

// Strict parse: unknown keys and mistyped values raise ConfigError naming the
// key. Precedence is overrides > file > variant defaults.
RunConfig resolve_config(const nlohmann::json& file, const Overrides& overrides = {});
RunConfig load_config(const std::optional<std::filesystem::path>& path, const Overrides& overrides = {});

// Throws ConfigError.
void validate(const RunConfig& cfg);

nlohmann::json to_json(const RunConfig& cfg);

Architecture architecture(const RunConfig& cfg);
// Suite and stream are both seeded from the run seed's "stream" sub-seed.
std::vector<TaskSpec> run_suite(const RunConfig& cfg);
GeneratedData run_data(const RunConfig& cfg);

} // namespace memloom
