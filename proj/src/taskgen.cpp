#include "memloom/taskgen.hpp"

#include "memloom/error.hpp"
#include "memloom/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

namespace memloom {

namespace {

// Base geometry at difficulty 1.
constexpr double kNoiseSd = 0.3;
constexpr double kMarginInSd = 6.0;
constexpr double kTaskRadius = 6.0;

// Columns of a random dim x cols matrix with orthonormal columns.
std::vector<std::vector<double>> random_orthonormal(std::size_t dim, std::size_t cols, Rng& rng)
{
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<std::vector<double>> q;
    while (q.size() < cols) {
        std::vector<double> v(dim);
        for (auto& x : v) {
            x = n(rng);
        }
        for (const auto& u : q) {
            const double dot = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
            for (std::size_t i = 0; i < dim; ++i) {
                v[i] -= dot * u[i];
            }
        }
        const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (norm < 1e-8) {
            continue;
        }
        for (auto& x : v) {
            x /= norm;
        }
        q.push_back(std::move(v));
    }
    return q;
}

} // namespace

std::vector<TaskSpec> make_suite(const SuiteConfig& cfg)
{
    if (cfg.n_tasks < 2) {
        throw ContractError("a suite needs at least 2 tasks");
    }
    if (cfg.classes_per_task < 2) {
        throw ContractError("a task needs at least 2 classes");
    }
    if (!(cfg.difficulty > 0.0) || !std::isfinite(cfg.difficulty)) {
        throw ContractError("difficulty must be positive");
    }
    if (cfg.classes_per_task + 1 > cfg.dim) {
        throw ContractError("infeasible margin: " + std::to_string(cfg.classes_per_task) + " equidistant class means plus a task offset need dim > " + std::to_string(cfg.classes_per_task) + ", got dim = " + std::to_string(cfg.dim));
    }
    const double margin = kMarginInSd * kNoiseSd / cfg.difficulty;
    const double radius = kTaskRadius / cfg.difficulty;
    std::vector<TaskSpec> suite;
    suite.reserve(cfg.n_tasks);
    for (std::size_t t = 0; t < cfg.n_tasks; ++t) {
        TaskSpec spec;
        spec.id = "t" + std::to_string(t);
        spec.noise_sd = kNoiseSd;
        spec.margin = margin;
        spec.n_train = cfg.n_train;
        spec.n_test = cfg.n_test;
        Rng rng = make_rng(cfg.seed, "suite/" + spec.id);
        // One extra axis gives the task centre direction.
        const auto axes = random_orthonormal(cfg.dim, cfg.classes_per_task + 1, rng);
        const double arm = margin / std::sqrt(2.0);
        for (std::size_t c = 0; c < cfg.classes_per_task; ++c) {
            spec.classes.push_back(t * cfg.classes_per_task + c);
            std::vector<double> mean(cfg.dim);
            for (std::size_t i = 0; i < cfg.dim; ++i) {
                mean[i] = radius * axes.back()[i] + arm * axes[c][i];
            }
            spec.means.push_back(std::move(mean));
        }
        suite.push_back(std::move(spec));
    }
    return suite;
}

std::size_t total_classes(std::span<const TaskSpec> suite) noexcept
{
    std::size_t n = 0;
    for (const auto& t : suite) {
        n += t.classes.size();
    }
    return n;
}

std::vector<std::string> canonical_ordering(std::span<const TaskSpec> suite, std::string_view name)
{
    static const std::map<std::string_view, std::vector<std::size_t>> five = {
        { "i", { 1, 0, 3, 2, 4 } },
        { "ii", { 3, 4, 0, 2, 1 } },
        { "iii", { 1, 4, 2, 3, 0 } },
        { "iv", { 0, 1, 2, 4, 3 } },
    };
    if (!five.contains(name)) {
        throw ConfigError("unknown ordering '" + std::string(name) + "' (expected i|ii|iii|iv)");
    }
    std::vector<std::size_t> perm(suite.size());
    std::iota(perm.begin(), perm.end(), std::size_t { 0 });
    if (suite.size() == 5) {
        perm = five.at(name);
    } else if (name == "ii") {
        std::reverse(perm.begin(), perm.end());
    } else if (name != "i") {
        Rng rng = make_rng(suite.size(), "ordering/" + std::string(name));
        std::shuffle(perm.begin(), perm.end(), rng);
    }
    std::vector<std::string> out;
    out.reserve(perm.size());
    for (auto i : perm) {
        out.push_back(suite[i].id);
    }
    return out;
}

namespace {

std::vector<Example> sample_task(const TaskSpec& spec, std::size_t n, Rng& rng)
{
    std::normal_distribution<double> noise(0.0, spec.noise_sd);
    std::uniform_int_distribution<std::size_t> pick(0, spec.classes.size() - 1);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = pick(rng);
        Example e;
        e.x = spec.means[c];
        for (auto& v : e.x) {
            v += noise(rng);
        }
        e.y = spec.classes[c];
        e.task = spec.id;
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace

GeneratedData generate_stream(std::span<const TaskSpec> suite, std::span<const std::string> ordering, std::uint64_t seed)
{
    std::vector<std::string> seen;
    GeneratedData out;
    out.stream.seed = seed;
    for (const auto& id : ordering) {
        const auto it = std::find_if(suite.begin(), suite.end(), [&](const TaskSpec& t) { return t.id == id; });
        if (it == suite.end()) {
            throw ContractError("unknown task id '" + id + "' in ordering");
        }
        if (std::find(seen.begin(), seen.end(), id) != seen.end()) {
            throw ContractError("task id '" + id + "' repeated in ordering");
        }
        seen.push_back(id);
        Rng train_rng = make_rng(seed, "train/" + id);
        auto train = sample_task(*it, it->n_train, train_rng);
        std::shuffle(train.begin(), train.end(), train_rng);
        out.stream.examples.insert(out.stream.examples.end(), std::make_move_iterator(train.begin()), std::make_move_iterator(train.end()));
        Rng test_rng = make_rng(seed, "test/" + id);
        out.tests.push_back({ id, sample_task(*it, it->n_test, test_rng) });
    }
    if (seen.size() != suite.size()) {
        throw ContractError("ordering must be a permutation of all suite tasks");
    }
    out.stream.ordering = seen;
    return out;
}

TaskStream shuffled_jointly(const TaskStream& stream, std::uint64_t seed)
{
    TaskStream out = stream;
    Rng rng = make_rng(seed, "mtl-shuffle");
    std::shuffle(out.examples.begin(), out.examples.end(), rng);
    return out;
}

std::vector<std::size_t> task_boundaries(const TaskStream& stream)
{
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i <= stream.examples.size(); ++i) {
        if (i == stream.examples.size() || stream.examples[i].task != stream.examples[i - 1].task) {
            out.push_back(i);
        }
    }
    return out;
}

std::string serialize_example(const Example& e)
{
    nlohmann::ordered_json j;
    j["x"] = e.x;
    j["y"] = e.y;
    j["task"] = e.task;
    return j.dump();
}

Example parse_example(std::string_view line, std::size_t lineno)
{
    const auto where = "line " + std::to_string(lineno) + ": ";
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) {
        throw ParseError(where + "record is not an object");
    }
    for (const char* key : { "x", "y", "task" }) {
        if (!j.contains(key)) {
            throw ParseError(where + "record is missing \"" + key + "\"");
        }
    }
    Example e;
    try {
        e.x = j.at("x").get<std::vector<double>>();
        if (!j.at("y").is_number_integer() || j.at("y").get<long long>() < 0) {
            throw ParseError(where + "\"y\" must be a non-negative integer");
        }
        e.y = j.at("y").get<std::size_t>();
        e.task = j.at("task").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
        throw ParseError(where + ex.what());
    }
    return e;
}

void save_stream(const std::filesystem::path& path, std::span<const Example> examples)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write stream " + path.string());
    }
    for (const auto& e : examples) {
        out << serialize_example(e) << '\n';
    }
}

std::vector<Example> load_stream(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ParseError("cannot open stream " + path.string());
    }
    std::vector<Example> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        Example e = parse_example(line, lineno);
        if (!out.empty() && e.x.size() != out.front().x.size()) {
            throw ParseError("line " + std::to_string(lineno) + ": dimension " + std::to_string(e.x.size()) + " differs from " + std::to_string(out.front().x.size()));
        }
        out.push_back(std::move(e));
    }
    return out;
}

std::uint64_t stream_hash(std::span<const Example> examples)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : examples) {
        for (char c : serialize_example(e)) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        h ^= '\n';
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace memloom
