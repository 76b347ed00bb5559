#pragma once

#include "memloom/learners.hpp"
#include "memloom/taskgen.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace memloom {

// git-describe style identifier baked in at build time.
std::string_view build_id() noexcept;

struct TaskScore {
    std::string task;
    double accuracy = 0.0;

    bool operator==(const TaskScore&) const = default;
};

double accuracy(std::span<const std::size_t> predictions, std::span<const Example> examples);

// Unweighted mean; throws on an empty list.
double macro_average(std::span<const double> per_task);
double macro_average(std::span<const TaskScore> per_task);

// Accuracy of the final task in `ordering`.
double last_task_score(std::span<const TaskScore> per_task, std::span<const std::string> ordering);

// Learner snapshots at stage 0 (before training) and after each task.
std::vector<Learner> train_with_checkpoints(Learner& learner, const TaskStream& stream);

// First-task accuracy at every stage, using each snapshot's evaluation mode
// (or direct prediction when adapt_eval is false). Needs n_tasks + 1 stages.
std::vector<double> forgetting_curve(std::span<const Learner> checkpoints, std::size_t n_tasks, const TestSet& first_task, bool adapt_eval = true);

struct NeighborMatrix {
    std::vector<std::string> tasks;
    // rows[i][j]: share of neighbours from task j among those retrieved for
    // task-i queries.
    std::vector<std::vector<double>> rows;
    std::vector<std::size_t> counts;
    // Rows without any retrieved neighbour (emitted as zeros).
    std::vector<bool> empty;

    // Mean of the diagonal over populated rows.
    double mean_diagonal() const;
};

// Each entry is (query task index, neighbour task index).
NeighborMatrix neighbor_source_matrix(std::span<const std::pair<std::size_t, std::size_t>> log, std::span<const std::string> tasks);

// Maps the neighbour indices of a per-example evaluation to task indices via
// the stream position stored with every memory entry.
std::vector<std::pair<std::size_t, std::size_t>> neighbor_log(const Evaluation& eval, std::span<const TestSet> tests, const EpisodicMemory& memory, const TaskStream& stream);

// K-nearest-neighbour retrieval of every test example against the learner's
// memory (what per-example adaptation would use), as a neighbour log.
std::vector<std::pair<std::size_t, std::size_t>> retrieval_log(const Learner& learner, std::span<const TestSet> tests, const TaskStream& stream);

struct Timing {
    double per_example_seconds = 0.0;
    double coarse_seconds = 0.0;
    double speedup = 0.0;
};

// Wall-clock of evaluating `tests` once per adaptation mode.
Timing timing_compare(const Learner& learner, std::span<const TestSet> tests, AdaptConfig per_example, AdaptConfig coarse);

struct EvalReport {
    std::vector<TaskScore> per_task;
    double macro = 0.0;
    double last_task = 0.0;
    std::vector<std::vector<std::size_t>> predictions;
    std::optional<std::vector<double>> forgetting;
    std::optional<NeighborMatrix> neighbors;
    std::optional<Timing> timing;
    nlohmann::json config;
};

EvalReport make_report(const Evaluation& eval, std::span<const TestSet> tests, std::span<const std::string> ordering, nlohmann::json config);

nlohmann::json to_json(const EvalReport& report);

// metrics.json, metrics.csv, and, when present, forgetting_curve.csv,
// neighbor_matrix.csv and timing.json. Every file carries the config echo and
// build id.
void write_reports(const std::filesystem::path& dir, const EvalReport& report);

// "%.17g": round-trips doubles exactly.
std::string format_double(double v);

} // namespace memloom
