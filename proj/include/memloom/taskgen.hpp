#pragma once

#include "memloom/data.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace memloom {

struct SuiteConfig {
    std::size_t n_tasks = 5;
    std::size_t classes_per_task = 4;
    std::size_t dim = 32;
    // Scales class margins down and pulls task centres together as it grows.
    double difficulty = 1.0;
    std::size_t n_train = 2000;
    std::size_t n_test = 500;
    std::uint64_t seed = 0;

    bool operator==(const SuiteConfig&) const = default;
};

// One synthetic task: an isotropic Gaussian per class. Class means sit on
// scaled orthonormal axes of a task-specific random rotation, offset by a task
// centre, so every pair of means is exactly `margin` apart.
struct TaskSpec {
    std::string id;
    std::vector<std::size_t> classes;
    std::vector<std::vector<double>> means;
    double noise_sd = 0.0;
    double margin = 0.0;
    std::size_t n_train = 0;
    std::size_t n_test = 0;
};

std::vector<TaskSpec> make_suite(const SuiteConfig& cfg);

std::size_t total_classes(std::span<const TaskSpec> suite) noexcept;

// Named orderings i, ii, iii, iv. For five tasks these are the permutations
// used for the classification benchmark; other sizes use identity, reversed,
// and two seeded permutations.
std::vector<std::string> canonical_ordering(std::span<const TaskSpec> suite, std::string_view name);

struct TestSet {
    std::string task;
    std::vector<Example> examples;
};

struct TaskStream {
    std::vector<Example> examples;
    std::vector<std::string> ordering;
    std::uint64_t seed = 0;

    std::size_t size() const noexcept { return examples.size(); }
};

struct GeneratedData {
    TaskStream stream;
    // In ordering sequence.
    std::vector<TestSet> tests;
};

// Examples of each task are drawn from a generator seeded by (seed, task id)
// and shuffled, then concatenated in `ordering`.
GeneratedData generate_stream(std::span<const TaskSpec> suite, std::span<const std::string> ordering, std::uint64_t seed);

// Same multiset of examples, jointly shuffled (MTL oracle input).
TaskStream shuffled_jointly(const TaskStream& stream, std::uint64_t seed);

// Stream positions where each task segment ends (exclusive), in order.
std::vector<std::size_t> task_boundaries(const TaskStream& stream);

// One record per line: {"x": [...], "y": int, "task": "..."}.
void save_stream(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> load_stream(const std::filesystem::path& path);

std::string serialize_example(const Example& e);
Example parse_example(std::string_view line, std::size_t lineno);

// FNV-1a over the serialized records.
std::uint64_t stream_hash(std::span<const Example> examples);

} // namespace memloom
