#include "memloom/commands.hpp"

#include "memloom/error.hpp"
#include "memloom/log.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace memloom {

namespace {

fs::path data_path(const RunConfig& cfg, const std::optional<fs::path>& data_dir)
{
    return data_dir ? *data_dir : cfg.output / "data";
}

void write_json(const fs::path& path, const json& j)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << j.dump(2) << '\n';
}

json read_json(const fs::path& path, const std::string& what)
{
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("missing " + what + ": " + path.string());
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(what + " " + path.string() + " is not valid JSON: " + e.what());
    }
}

std::string hex64(std::uint64_t h)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct LoadedData {
    TaskStream stream;
    std::vector<TestSet> tests;
};

LoadedData load_data(const fs::path& dir)
{
    const json manifest = read_json(dir / "manifest.json", "data manifest (run `generate` first)");
    LoadedData d;
    d.stream.examples = load_stream(dir / "stream.jsonl");
    d.stream.ordering = manifest.at("ordering").get<std::vector<std::string>>();
    d.stream.seed = manifest.at("stream_seed").get<std::uint64_t>();
    for (const auto& task : d.stream.ordering) {
        d.tests.push_back({ task, load_stream(dir / ("test_" + task + ".jsonl")) });
    }
    return d;
}

json config_meta(const RunConfig& cfg)
{
    return { { "build_id", build_id() }, { "config", to_json(cfg) } };
}

void save_learner(const fs::path& stem, const Learner& l, const RunConfig& cfg)
{
    json meta = config_meta(cfg);
    meta["key_network"] = l.keys().to_json();
    meta["step"] = l.state().step;
    meta["updates"] = l.state().updates;
    save_checkpoint(fs::path(stem.string() + ".checkpoint.json"), l.state().theta, cfg.seed, meta);
    if (uses_memory(cfg.learner.variant)) {
        save_memory_snapshot(fs::path(stem.string() + ".memory.jsonl"), l.state().memory, cfg.learner.policy, config_meta(cfg));
    }
}

Learner load_learner(const fs::path& checkpoint, const std::optional<fs::path>& memory, const RunConfig& cfg)
{
    if (!fs::exists(checkpoint)) {
        throw std::runtime_error("missing checkpoint: " + checkpoint.string());
    }
    Checkpoint ck = load_checkpoint(checkpoint);
    if (!(ck.theta.arch() == architecture(cfg))) {
        throw ConfigError("checkpoint architecture does not match the config");
    }
    KeyNetwork keys = ck.meta.contains("key_network") ? KeyNetwork::from_json(ck.meta.at("key_network")) : KeyNetwork(cfg.suite.dim, cfg.learner.key_dim, sub_seed(cfg.seed, "init/keys"), cfg.learner.normalize_keys);
    Learner l(cfg.learner, ck.theta, std::move(keys), cfg.seed);
    if (uses_memory(cfg.learner.variant)) {
        if (!memory || !fs::exists(*memory)) {
            throw std::runtime_error("missing memory snapshot: " + (memory ? memory->string() : std::string("(none)")));
        }
        auto snap = load_memory_snapshot(*memory);
        l.restore(ck.theta, std::move(snap.memory));
    }
    return l;
}

} // namespace

std::string file_hash(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + path.string());
    }
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 15];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    return hex64(h);
}

std::size_t thread_budget()
{
    if (const char* env = std::getenv("MEMLOOM_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) {
            return static_cast<std::size_t>(v);
        }
        log::warn("ignoring invalid MEMLOOM_THREADS='" + std::string(env) + "'");
    }
    return std::max(1U, std::thread::hardware_concurrency());
}

void cmd_generate(const RunConfig& cfg, const std::optional<fs::path>& data_dir)
{
    const fs::path dir = data_path(cfg, data_dir);
    fs::create_directories(dir);
    const auto data = run_data(cfg);
    save_stream(dir / "stream.jsonl", data.stream.examples);
    json tests = json::array();
    for (const auto& t : data.tests) {
        const std::string name = "test_" + t.task + ".jsonl";
        save_stream(dir / name, t.examples);
        tests.push_back({ { "task", t.task }, { "file", name }, { "count", t.examples.size() } });
    }
    json m = config_meta(cfg);
    m["format"] = "memloom-data";
    m["ordering"] = data.stream.ordering;
    m["stream_seed"] = data.stream.seed;
    m["stream_file"] = "stream.jsonl";
    m["stream_length"] = data.stream.size();
    m["stream_hash"] = hex64(stream_hash(data.stream.examples));
    m["task_boundaries"] = task_boundaries(data.stream);
    m["tests"] = tests;
    write_json(dir / "manifest.json", m);
    log::info("wrote " + std::to_string(data.stream.size()) + " stream examples to " + dir.string());
}

void cmd_train(const RunConfig& cfg, const std::optional<fs::path>& data_dir)
{
    const fs::path dir = data_path(cfg, data_dir);
    const LoadedData data = load_data(dir);
    if (!data.stream.examples.empty() && data.stream.examples.front().x.size() != cfg.suite.dim) {
        throw ConfigError("stream dimension " + std::to_string(data.stream.examples.front().x.size()) + " does not match suite.dim " + std::to_string(cfg.suite.dim));
    }
    fs::create_directories(cfg.output);
    const bool mtl = cfg.learner.variant == Variant::Mtl;
    const TaskStream stream = mtl ? shuffled_jointly(data.stream, cfg.seed) : data.stream;

    Learner learner(cfg.learner, architecture(cfg), cfg.seed);
    json stages = json::array();
    if (cfg.analysis.forgetting_curve && !mtl) {
        const fs::path sdir = cfg.output / "stages";
        fs::create_directories(sdir);
        const auto save_stage = [&](const Learner& l) {
            const std::string stem = "stage_" + std::to_string(stages.size());
            save_learner(sdir / stem, l, cfg);
            stages.push_back({ { "stage", stages.size() }, { "step", l.state().step }, { "stem", "stages/" + stem } });
        };
        save_stage(learner);
        Learner::Observer obs;
        const auto bounds = task_boundaries(stream);
        obs.at.assign(bounds.begin(), bounds.end());
        obs.callback = [&](std::uint64_t, const Learner& l) { save_stage(l); };
        learner.train_stream(stream, obs);
    } else {
        learner.train_stream(stream);
    }
    save_learner(cfg.output / "final", learner, cfg);

    const auto& st = learner.state();
    json events = json::array();
    for (const auto& e : st.replay_events) {
        events.push_back({ { "step", e.step }, { "memory_size", e.memory_size }, { "skipped", e.skipped } });
    }
    json m = config_meta(cfg);
    m["seed"] = cfg.seed;
    m["stream_hash"] = hex64(stream_hash(stream.examples));
    m["checkpoint"] = "final.checkpoint.json";
    m["checkpoint_hash"] = file_hash(cfg.output / "final.checkpoint.json");
    if (uses_memory(cfg.learner.variant)) {
        m["memory"] = "final.memory.jsonl";
        m["memory_hash"] = file_hash(cfg.output / "final.memory.jsonl");
    } else {
        m["memory"] = nullptr;
    }
    m["memory_size"] = st.memory.size();
    m["steps"] = st.step;
    m["updates"] = st.updates;
    m["replay_events"] = events;
    m["self_neighbor_hits"] = st.self_neighbor_hits;
    m["stages"] = stages;
    m["final_metrics"] = nullptr;
    write_json(cfg.output / "run_manifest.json", m);
    log::info("trained " + std::string(to_string(cfg.learner.variant)) + ": " + std::to_string(st.step) + " steps, |M| = " + std::to_string(st.memory.size()));
}

EvalReport cmd_eval(const RunConfig& cfg, const std::optional<fs::path>& data_dir)
{
    const LoadedData data = load_data(data_path(cfg, data_dir));
    const Learner learner = load_learner(cfg.output / "final.checkpoint.json", cfg.output / "final.memory.jsonl", cfg);
    const Evaluation ev = learner.evaluate(data.tests);
    EvalReport report = make_report(ev, data.tests, data.stream.ordering, to_json(cfg));

    const bool lifelong = cfg.learner.variant != Variant::Mtl;
    if (cfg.analysis.forgetting_curve && lifelong) {
        const json manifest = read_json(cfg.output / "run_manifest.json", "run manifest");
        std::vector<Learner> stages;
        for (const auto& s : manifest.at("stages")) {
            const fs::path stem = cfg.output / s.at("stem").get<std::string>();
            stages.push_back(load_learner(fs::path(stem.string() + ".checkpoint.json"), fs::path(stem.string() + ".memory.jsonl"), cfg));
        }
        report.forgetting = forgetting_curve(stages, data.tests.size(), data.tests.front(), cfg.analysis.adapt_eval);
    }
    if (cfg.analysis.neighbor_matrix && uses_memory(cfg.learner.variant)) {
        const auto log = retrieval_log(learner, data.tests, data.stream);
        report.neighbors = neighbor_source_matrix(log, data.stream.ordering);
    }
    if (cfg.analysis.timing && (cfg.learner.variant == Variant::Mbpa || cfg.learner.variant == Variant::MetaMbpa)) {
        report.timing = timing_compare(learner, data.tests, cfg.learner.adapt, cfg.learner.adapt);
    }
    write_reports(cfg.output, report);

    const fs::path mpath = cfg.output / "run_manifest.json";
    if (fs::exists(mpath)) {
        json m = read_json(mpath, "run manifest");
        m["final_metrics"] = { { "macro_average", report.macro }, { "last_task", report.last_task }, { "metrics", "metrics.json" } };
        write_json(mpath, m);
    }
    return report;
}

EvalReport cmd_run(const RunConfig& cfg)
{
    cmd_generate(cfg);
    cmd_train(cfg);
    return cmd_eval(cfg);
}

namespace {

struct CompareRow {
    std::string variant;
    std::string policy;
    double rate = 0.0;
    std::string ordering;
    std::uint64_t seed = 0;
    bool meta_objective = true;
    bool adapt_eval = true;
    double macro = 0.0;
    double last = 0.0;
    double retention = 0.0;
    json suite;
};

CompareRow read_row(const fs::path& dir)
{
    const json m = read_json(dir / "metrics.json", "metrics");
    const json& c = m.at("config");
    CompareRow r;
    r.variant = c.at("learner").at("variant").get<std::string>();
    r.policy = c.at("policy").at("name").get<std::string>();
    r.rate = c.at("policy").at("rate").get<double>();
    r.ordering = c.at("ordering").get<std::string>();
    r.seed = c.at("seed").get<std::uint64_t>();
    r.meta_objective = c.at("learner").at("meta_objective").get<bool>();
    r.adapt_eval = c.at("analysis").at("adapt_eval").get<bool>();
    r.macro = m.at("macro_average").get<double>();
    r.last = m.at("last_task").get<double>();
    r.suite = c.at("suite");
    // First task in the ordering: its final accuracy.
    const auto& per_task = m.at("per_task");
    r.retention = per_task.empty() ? 0.0 : per_task.front().at("accuracy").get<double>();
    return r;
}

std::pair<double, double> mean_std(const std::vector<double>& v)
{
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) {
        var += (x - mean) * (x - mean);
    }
    return { mean, v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0 };
}

} // namespace

std::string cmd_compare(std::span<const fs::path> inputs, const fs::path& out_dir)
{
    if (inputs.size() < 2) {
        throw ConfigError("compare needs at least two run directories or config files");
    }
    std::vector<fs::path> dirs(inputs.size());
    std::vector<std::optional<RunConfig>> to_run(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (fs::is_directory(inputs[i])) {
            dirs[i] = inputs[i];
        } else {
            to_run[i] = load_config(inputs[i]);
            dirs[i] = to_run[i]->output;
        }
    }
    std::atomic<std::size_t> next { 0 };
    std::exception_ptr failure;
    std::mutex failure_mutex;
    const auto worker = [&] {
        for (std::size_t i = next++; i < inputs.size(); i = next++) {
            if (!to_run[i]) {
                continue;
            }
            try {
                cmd_run(*to_run[i]);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) {
                    failure = std::current_exception();
                }
            }
        }
    };
    const std::size_t n_threads = std::min(thread_budget(), inputs.size());
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& t : pool) {
        t.join();
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    std::vector<CompareRow> rows;
    for (const auto& d : dirs) {
        rows.push_back(read_row(d));
        if (rows.back().suite != rows.front().suite) {
            throw ConfigError("incompatible suites: " + d.string() + " differs from " + dirs.front().string());
        }
    }
    const auto b = [](bool v) { return std::string(v ? "on" : "off"); };
    std::string csv = "# build_id: " + std::string(build_id()) + "\n";
    csv += "kind,variant,policy,memory_rate,meta_objective,adapt_eval,ordering,seed,n,macro_average,macro_std,last_task,last_task_std,first_task_retention,first_task_retention_std,delta_macro,delta_last_task\n";
    for (const auto& r : rows) {
        csv += "run," + r.variant + "," + r.policy + "," + format_double(r.rate) + "," + b(r.meta_objective) + "," + b(r.adapt_eval) + "," + r.ordering + "," + std::to_string(r.seed) + ",1," + format_double(r.macro) + ",0," + format_double(r.last) + ",0," + format_double(r.retention) + ",0," + format_double(r.macro - rows.front().macro) + "," + format_double(r.last - rows.front().last) + "\n";
    }
    // Aggregate over orderings and seeds.
    using Key = std::tuple<std::string, std::string, double, bool, bool>;
    std::vector<Key> order;
    std::map<Key, std::vector<const CompareRow*>> groups;
    for (const auto& r : rows) {
        Key k { r.variant, r.policy, r.rate, r.meta_objective, r.adapt_eval };
        if (!groups.contains(k)) {
            order.push_back(k);
        }
        groups[k].push_back(&r);
    }
    const auto first_group = groups[order.front()];
    std::vector<double> base_macro, base_last;
    for (const auto* r : first_group) {
        base_macro.push_back(r->macro);
        base_last.push_back(r->last);
    }
    const double bm = mean_std(base_macro).first;
    const double bl = mean_std(base_last).first;
    for (const auto& k : order) {
        const auto& g = groups[k];
        std::vector<double> mac, last, ret;
        for (const auto* r : g) {
            mac.push_back(r->macro);
            last.push_back(r->last);
            ret.push_back(r->retention);
        }
        const auto [mm, ms] = mean_std(mac);
        const auto [lm, ls] = mean_std(last);
        const auto [rm, rs] = mean_std(ret);
        csv += "aggregate," + std::get<0>(k) + "," + std::get<1>(k) + "," + format_double(std::get<2>(k)) + "," + b(std::get<3>(k)) + "," + b(std::get<4>(k)) + ",*,*," + std::to_string(g.size()) + "," + format_double(mm) + "," + format_double(ms) + "," + format_double(lm) + "," + format_double(ls) + "," + format_double(rm) + "," + format_double(rs) + "," + format_double(mm - bm) + "," + format_double(lm - bl) + "\n";
    }
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "comparison.csv", std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write " + (out_dir / "comparison.csv").string());
    }
    out << csv;
    return csv;
}

} // namespace memloom
