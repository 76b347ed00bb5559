#include "memloom/eval.hpp"

#include "memloom/error.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

#ifndef MEMLOOM_BUILD_ID
#define MEMLOOM_BUILD_ID "unknown"
#endif

namespace memloom {

std::string_view build_id() noexcept
{
    return MEMLOOM_BUILD_ID;
}

std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

double accuracy(std::span<const std::size_t> predictions, std::span<const Example> examples)
{
    if (predictions.size() != examples.size()) {
        throw ContractError("predictions and examples differ in length");
    }
    if (examples.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        hit += predictions[i] == examples[i].y ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(examples.size());
}

double macro_average(std::span<const double> per_task)
{
    if (per_task.empty()) {
        throw ContractError("macro average of an empty list");
    }
    return std::accumulate(per_task.begin(), per_task.end(), 0.0) / static_cast<double>(per_task.size());
}

double macro_average(std::span<const TaskScore> per_task)
{
    std::vector<double> v;
    v.reserve(per_task.size());
    for (const auto& s : per_task) {
        v.push_back(s.accuracy);
    }
    return macro_average(v);
}

double last_task_score(std::span<const TaskScore> per_task, std::span<const std::string> ordering)
{
    if (ordering.empty()) {
        throw ContractError("last-task score needs an ordering");
    }
    for (const auto& s : per_task) {
        if (s.task == ordering.back()) {
            return s.accuracy;
        }
    }
    throw ContractError("no score for last task '" + ordering.back() + "'");
}

std::vector<Learner> train_with_checkpoints(Learner& learner, const TaskStream& stream)
{
    std::vector<Learner> out;
    out.push_back(learner);
    Learner::Observer obs;
    const std::uint64_t base = learner.state().step;
    for (auto b : task_boundaries(stream)) {
        obs.at.push_back(base + b);
    }
    obs.callback = [&out](std::uint64_t, const Learner& l) { out.push_back(l); };
    learner.train_stream(stream, obs);
    return out;
}

std::vector<double> forgetting_curve(std::span<const Learner> checkpoints, std::size_t n_tasks, const TestSet& first_task, bool adapt_eval)
{
    if (checkpoints.size() != n_tasks + 1) {
        throw ContractError("missing checkpoint: forgetting curve over " + std::to_string(n_tasks) + " tasks needs " + std::to_string(n_tasks + 1) + " stages, got " + std::to_string(checkpoints.size()));
    }
    const std::span<const TestSet> tests(&first_task, 1);
    std::vector<double> curve;
    curve.reserve(checkpoints.size());
    for (const auto& l : checkpoints) {
        const bool adapt = adapt_eval && l.config().adapt_eval && (l.config().variant == Variant::Mbpa || l.config().variant == Variant::MetaMbpa);
        curve.push_back(l.evaluate(tests, l.config().adapt, adapt).tasks.front().accuracy);
    }
    return curve;
}

double NeighborMatrix::mean_diagonal() const
{
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (!empty[i]) {
            sum += rows[i][i];
            ++n;
        }
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

NeighborMatrix neighbor_source_matrix(std::span<const std::pair<std::size_t, std::size_t>> log, std::span<const std::string> tasks)
{
    const std::size_t n = tasks.size();
    NeighborMatrix m;
    m.tasks.assign(tasks.begin(), tasks.end());
    std::vector<std::vector<std::size_t>> counts(n, std::vector<std::size_t>(n, 0));
    for (const auto& [q, s] : log) {
        if (q >= n || s >= n) {
            throw ContractError("neighbour log refers to an unknown task index");
        }
        ++counts[q][s];
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t total = std::accumulate(counts[i].begin(), counts[i].end(), std::size_t { 0 });
        std::vector<double> row(n, 0.0);
        if (total > 0) {
            for (std::size_t j = 0; j < n; ++j) {
                row[j] = static_cast<double>(counts[i][j]) / static_cast<double>(total);
            }
        }
        m.rows.push_back(std::move(row));
        m.counts.push_back(total);
        m.empty.push_back(total == 0);
    }
    return m;
}

std::vector<std::pair<std::size_t, std::size_t>> neighbor_log(const Evaluation& eval, std::span<const TestSet> tests, const EpisodicMemory& memory, const TaskStream& stream)
{
    const auto index_of = [&](const std::string& task) {
        for (std::size_t i = 0; i < tests.size(); ++i) {
            if (tests[i].task == task) {
                return i;
            }
        }
        throw ContractError("memory holds an example of task '" + task + "' with no test set");
    };
    std::vector<std::size_t> entry_task(memory.size());
    for (std::size_t e = 0; e < memory.size(); ++e) {
        const auto step = memory[e].step;
        if (step == 0 || step > stream.size()) {
            throw ContractError("memory entry " + std::to_string(e) + " has stream position " + std::to_string(step) + " outside the stream");
        }
        entry_task[e] = index_of(stream.examples[step - 1].task);
    }
    std::vector<std::pair<std::size_t, std::size_t>> log;
    for (std::size_t q = 0; q < eval.tasks.size() && q < tests.size(); ++q) {
        for (const auto& idx : eval.tasks[q].neighbors) {
            for (auto e : idx) {
                log.emplace_back(q, entry_task.at(e));
            }
        }
    }
    return log;
}

std::vector<std::pair<std::size_t, std::size_t>> retrieval_log(const Learner& learner, std::span<const TestSet> tests, const TaskStream& stream)
{
    Evaluation eval;
    const auto& mem = learner.state().memory;
    for (const auto& t : tests) {
        TaskEvaluation r;
        if (!mem.empty()) {
            for (const auto& e : t.examples) {
                r.neighbors.push_back(mem.knn(learner.keys().encode(e.x), learner.config().adapt.k));
            }
        }
        eval.tasks.push_back(std::move(r));
    }
    return neighbor_log(eval, tests, mem, stream);
}

Timing timing_compare(const Learner& learner, std::span<const TestSet> tests, AdaptConfig per_example, AdaptConfig coarse)
{
    per_example.mode = AdaptMode::PerExample;
    coarse.mode = AdaptMode::Coarse;
    using clock = std::chrono::steady_clock;
    Timing t;
    auto t0 = clock::now();
    (void)learner.evaluate(tests, per_example, true);
    auto t1 = clock::now();
    (void)learner.evaluate(tests, coarse, true);
    auto t2 = clock::now();
    t.per_example_seconds = std::chrono::duration<double>(t1 - t0).count();
    t.coarse_seconds = std::chrono::duration<double>(t2 - t1).count();
    t.speedup = t.coarse_seconds > 0.0 ? t.per_example_seconds / t.coarse_seconds : 0.0;
    return t;
}

EvalReport make_report(const Evaluation& eval, std::span<const TestSet> tests, std::span<const std::string> ordering, nlohmann::json config)
{
    if (eval.tasks.size() != tests.size()) {
        throw ContractError("evaluation and test sets differ in length");
    }
    EvalReport r;
    for (std::size_t i = 0; i < tests.size(); ++i) {
        r.per_task.push_back({ tests[i].task, accuracy(eval.tasks[i].predictions, tests[i].examples) });
        r.predictions.push_back(eval.tasks[i].predictions);
    }
    r.macro = macro_average(r.per_task);
    r.last_task = last_task_score(r.per_task, ordering);
    r.config = std::move(config);
    return r;
}

nlohmann::json to_json(const EvalReport& r)
{
    nlohmann::ordered_json per_task = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.per_task.size(); ++i) {
        per_task.push_back({ { "task", r.per_task[i].task }, { "accuracy", r.per_task[i].accuracy } });
    }
    nlohmann::ordered_json j;
    j["build_id"] = build_id();
    j["config"] = r.config;
    j["per_task"] = per_task;
    j["macro_average"] = r.macro;
    j["last_task"] = r.last_task;
    if (r.forgetting) {
        j["forgetting_curve"] = *r.forgetting;
    }
    if (r.neighbors) {
        j["neighbor_matrix"] = { { "tasks", r.neighbors->tasks }, { "rows", r.neighbors->rows }, { "counts", r.neighbors->counts }, { "empty_rows", r.neighbors->empty }, { "mean_diagonal", r.neighbors->mean_diagonal() } };
    }
    if (r.timing) {
        j["timing"] = { { "per_example_seconds", r.timing->per_example_seconds }, { "coarse_seconds", r.timing->coarse_seconds }, { "speedup", r.timing->speedup } };
    }
    nlohmann::ordered_json preds = nlohmann::ordered_json::object();
    for (std::size_t i = 0; i < r.per_task.size(); ++i) {
        preds[r.per_task[i].task] = r.predictions[i];
    }
    j["predictions"] = preds;
    return nlohmann::json::parse(j.dump());
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << text;
}

std::string csv_preamble(const EvalReport& r)
{
    return "# build_id: " + std::string(build_id()) + "\n# config: " + r.config.dump() + "\n";
}

} // namespace

void write_reports(const std::filesystem::path& dir, const EvalReport& r)
{
    std::filesystem::create_directories(dir);
    write_text(dir / "metrics.json", to_json(r).dump(2) + "\n");

    std::string csv = csv_preamble(r) + "task,accuracy\n";
    for (const auto& s : r.per_task) {
        csv += s.task + "," + format_double(s.accuracy) + "\n";
    }
    write_text(dir / "metrics.csv", csv);

    if (r.forgetting) {
        std::string f = csv_preamble(r) + "stage,first_task_accuracy\n";
        for (std::size_t i = 0; i < r.forgetting->size(); ++i) {
            f += std::to_string(i) + "," + format_double((*r.forgetting)[i]) + "\n";
        }
        write_text(dir / "forgetting_curve.csv", f);
    }
    if (r.neighbors) {
        const auto& m = *r.neighbors;
        std::string n = csv_preamble(r) + "query_task";
        for (const auto& t : m.tasks) {
            n += "," + t;
        }
        n += ",count,empty\n";
        for (std::size_t i = 0; i < m.rows.size(); ++i) {
            n += m.tasks[i];
            for (double v : m.rows[i]) {
                n += "," + format_double(v);
            }
            n += "," + std::to_string(m.counts[i]) + "," + (m.empty[i] ? "1" : "0") + "\n";
        }
        write_text(dir / "neighbor_matrix.csv", n);
    }
    if (r.timing) {
        nlohmann::ordered_json t;
        t["build_id"] = build_id();
        t["config"] = r.config;
        t["per_example_seconds"] = r.timing->per_example_seconds;
        t["coarse_seconds"] = r.timing->coarse_seconds;
        t["speedup"] = r.timing->speedup;
        write_text(dir / "timing.json", t.dump(2) + "\n");
    }
}

} // namespace memloom
