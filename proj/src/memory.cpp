#include "memloom/memory.hpp"

#include "memloom/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace memloom {

// ---------------------------------------------------------------------------
// EpisodicMemory

EpisodicMemory::EpisodicMemory(std::size_t key_dim)
    : key_dim_(key_dim)
{
    if (key_dim == 0) {
        throw ContractError("memory key dimension must be positive");
    }
}

void EpisodicMemory::append(MemoryEntry entry)
{
    if (entry.key.size() != key_dim_) {
        throw ContractError("memory entry key has dimension " + std::to_string(entry.key.size()) + ", expected " + std::to_string(key_dim_));
    }
    keys_.insert(keys_.end(), entry.key.begin(), entry.key.end());
    entries_.push_back(std::move(entry));
}

double EpisodicMemory::squared_distance(std::size_t i, std::span<const double> query) const
{
    const double* k = keys_.data() + i * key_dim_;
    double s = 0.0;
    for (std::size_t j = 0; j < key_dim_; ++j) {
        const double d = query[j] - k[j];
        s += d * d;
    }
    return s;
}

double EpisodicMemory::min_squared_distance(std::span<const double> query) const
{
    if (query.size() != key_dim_) {
        throw ContractError("query key has the wrong dimension");
    }
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        best = std::min(best, squared_distance(i, query));
    }
    return best;
}

std::vector<std::size_t> EpisodicMemory::knn(std::span<const double> query, std::size_t k) const
{
    if (k == 0) {
        throw ContractError("knn requires K >= 1");
    }
    if (query.size() != key_dim_) {
        throw ContractError("query key has the wrong dimension");
    }
    const std::size_t n = entries_.size();
    std::vector<double> dist(n);
    for (std::size_t i = 0; i < n; ++i) {
        dist[i] = squared_distance(i, query);
    }
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t { 0 });
    const auto closer = [&](std::size_t a, std::size_t b) {
        if (dist[a] != dist[b]) {
            return dist[a] < dist[b];
        }
        if (entries_[a].step != entries_[b].step) {
            return entries_[a].step < entries_[b].step;
        }
        return a < b;
    };
    const std::size_t m = std::min(k, n);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(m), idx.end(), closer);
    idx.resize(m);
    return idx;
}

std::vector<std::size_t> EpisodicMemory::sample_uniform(std::size_t n, Rng& rng) const
{
    if (entries_.empty()) {
        throw ContractError("cannot sample from an empty memory");
    }
    std::uniform_int_distribution<std::size_t> pick(0, entries_.size() - 1);
    std::vector<std::size_t> out(n);
    for (auto& i : out) {
        i = pick(rng);
    }
    return out;
}

Batch EpisodicMemory::batch(std::span<const std::size_t> indices) const
{
    if (indices.empty()) {
        throw ContractError("empty memory batch");
    }
    const std::size_t d = entries_.at(indices.front()).x.size();
    std::vector<double> flat;
    flat.reserve(indices.size() * d);
    Batch b;
    b.labels.reserve(indices.size());
    for (std::size_t i : indices) {
        const auto& e = entries_.at(i);
        flat.insert(flat.end(), e.x.begin(), e.x.end());
        b.labels.push_back(e.y);
    }
    b.inputs = ad::Tensor::matrix(indices.size(), d, std::move(flat));
    return b;
}

// ---------------------------------------------------------------------------
// Policies

std::string_view to_string(PolicyKind kind) noexcept
{
    switch (kind) {
    case PolicyKind::Random: return "random";
    case PolicyKind::Diversity: return "diversity";
    case PolicyKind::Uncertainty: return "uncertainty";
    case PolicyKind::Forgettable: return "forgettable";
    }
    return "random";
}

PolicyKind parse_policy_kind(std::string_view name)
{
    if (name == "random") return PolicyKind::Random;
    if (name == "diversity") return PolicyKind::Diversity;
    if (name == "uncertainty") return PolicyKind::Uncertainty;
    if (name == "forgettable") return PolicyKind::Forgettable;
    throw ConfigError("unknown write policy '" + std::string(name) + "' (expected random|diversity|uncertainty|forgettable)");
}

std::string_view to_string(DiversityRule rule) noexcept
{
    return rule == DiversityRule::Intuitive ? "intuitive" : "literal";
}

DiversityRule parse_diversity_rule(std::string_view name)
{
    if (name == "intuitive") return DiversityRule::Intuitive;
    if (name == "literal") return DiversityRule::Literal;
    throw ConfigError("unknown diversity rule '" + std::string(name) + "' (expected intuitive|literal)");
}

double diversity_probability(double d2_min, double beta, DiversityRule rule)
{
    if (!(beta > 0.0)) {
        throw ContractError("diversity beta must be positive");
    }
    if (std::isinf(d2_min)) {
        return 1.0;
    }
    const double similar = std::exp(-std::max(d2_min, 0.0) / beta);
    return rule == DiversityRule::Intuitive ? 1.0 - similar : similar;
}

WritePolicy::WritePolicy(WritePolicyConfig config)
    : config_(config)
{
    if (!(config_.rate >= 0.0 && config_.rate <= 1.0)) {
        throw ContractError("write rate must lie in [0, 1]");
    }
    if (!(config_.beta > 0.0)) {
        throw ContractError("diversity beta must be positive");
    }
    if (config_.window == 0) {
        throw ContractError("policy window must be positive");
    }
}

double WritePolicy::raw_diversity(const EpisodicMemory& mem, std::span<const double> key) const
{
    return diversity_probability(mem.min_squared_distance(key), config_.beta, config_.rule);
}

double WritePolicy::confidence_threshold() const
{
    if (conf_sorted_.empty()) {
        return std::numeric_limits<double>::infinity();
    }
    const auto n = static_cast<double>(conf_sorted_.size());
    const auto k = static_cast<std::size_t>(std::max(1.0, std::round(config_.rate * n)));
    if (k >= conf_sorted_.size()) {
        return std::numeric_limits<double>::infinity();
    }
    return *std::next(conf_sorted_.begin(), static_cast<std::ptrdiff_t>(k - 1));
}

bool WritePolicy::within_quota() const noexcept
{
    return static_cast<double>(admitted_ + 1) <= config_.rate * static_cast<double>(steps_seen_);
}

double WritePolicy::write_probability(const EpisodicMemory& mem, std::span<const double> key, double confidence, std::size_t forget_events) const
{
    if (!(confidence >= 0.0 && confidence <= 1.0)) {
        throw ContractError("confidence must lie in [0, 1]");
    }
    switch (config_.kind) {
    case PolicyKind::Random:
        return config_.rate;
    case PolicyKind::Diversity: {
        if (mem.empty()) {
            return 1.0;
        }
        const double raw = raw_diversity(mem, key);
        if (!config_.rate_target) {
            return raw;
        }
        const double mean = raw_seen_ == 0 ? raw : raw_mean_;
        if (!(mean > 0.0)) {
            return raw > 0.0 ? 1.0 : 0.0;
        }
        return std::clamp(config_.rate * raw / mean, 0.0, 1.0);
    }
    case PolicyKind::Uncertainty:
        if (config_.rate >= 1.0) {
            return 1.0;
        }
        return confidence < confidence_threshold() && within_quota() ? 1.0 : 0.0;
    case PolicyKind::Forgettable:
        return forget_events >= 1 && within_quota() ? 1.0 : 0.0;
    }
    return 0.0;
}

void WritePolicy::observe(double raw, double confidence)
{
    if (config_.kind == PolicyKind::Diversity) {
        // Exponential moving average with an effective horizon of `window`.
        ++raw_seen_;
        const double w = std::max(1.0 / static_cast<double>(raw_seen_), 1.0 / static_cast<double>(config_.window));
        raw_mean_ += w * (raw - raw_mean_);
    } else if (config_.kind == PolicyKind::Uncertainty) {
        conf_window_.push_back(confidence);
        conf_sorted_.insert(confidence);
        if (conf_window_.size() > config_.window) {
            conf_sorted_.erase(conf_sorted_.find(conf_window_.front()));
            conf_window_.pop_front();
        }
    }
}

bool WritePolicy::maybe_write(EpisodicMemory& mem, MemoryEntry entry, Rng& rng, double confidence, std::size_t forget_events)
{
    const double p = write_probability(mem, entry.key, confidence, forget_events);
    const double raw = config_.kind == PolicyKind::Diversity && !mem.empty() ? raw_diversity(mem, entry.key) : 1.0;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const bool write = u(rng) < p;
    observe(raw, confidence);
    if (write) {
        mem.append(std::move(entry));
        ++admitted_;
    }
    return write;
}

// ---------------------------------------------------------------------------
// ForgetTracker

ForgetTracker::ForgetTracker(std::size_t capacity)
    : capacity_(capacity)
{
}

void ForgetTracker::add(std::uint64_t id, std::vector<double> x, std::size_t y, bool correct_now)
{
    if (capacity_ == 0) {
        return;
    }
    if (candidates_.size() == capacity_) {
        candidates_.pop_front();
    }
    candidates_.push_back({ id, std::move(x), y, correct_now, 0 });
}

ForgetTracker::Candidate& ForgetTracker::find(std::uint64_t id)
{
    auto it = std::find_if(candidates_.begin(), candidates_.end(), [id](const Candidate& c) { return c.id == id; });
    if (it == candidates_.end()) {
        throw ContractError("example " + std::to_string(id) + " is not tracked");
    }
    return *it;
}

const ForgetTracker::Candidate* ForgetTracker::find_ptr(std::uint64_t id) const
{
    auto it = std::find_if(candidates_.begin(), candidates_.end(), [id](const Candidate& c) { return c.id == id; });
    return it == candidates_.end() ? nullptr : &*it;
}

std::size_t ForgetTracker::record_forget_event(std::uint64_t id, bool was_correct_now_incorrect)
{
    Candidate& c = find(id);
    if (was_correct_now_incorrect) {
        ++c.forget_events;
    }
    return c.forget_events;
}

std::size_t ForgetTracker::recheck(std::uint64_t id, bool correct_now)
{
    Candidate& c = find(id);
    const bool forgot = c.ever_correct && !correct_now;
    c.ever_correct = c.ever_correct || correct_now;
    return record_forget_event(id, forgot);
}

void ForgetTracker::remove(std::uint64_t id)
{
    auto it = std::find_if(candidates_.begin(), candidates_.end(), [id](const Candidate& c) { return c.id == id; });
    if (it != candidates_.end()) {
        candidates_.erase(it);
    }
}

std::size_t ForgetTracker::forget_events(std::uint64_t id) const
{
    const Candidate* c = find_ptr(id);
    return c == nullptr ? 0 : c->forget_events;
}

// ---------------------------------------------------------------------------
// Snapshots

nlohmann::json policy_to_json(const WritePolicyConfig& p)
{
    return {
        { "name", to_string(p.kind) },
        { "rate", p.rate },
        { "beta", p.beta },
        { "rule", to_string(p.rule) },
        { "rate_target", p.rate_target },
        { "window", p.window },
        { "recheck_period", p.recheck_period },
        { "candidate_factor", p.candidate_factor },
    };
}

void save_memory_snapshot(const std::filesystem::path& path, const EpisodicMemory& mem, const WritePolicyConfig& policy, const nlohmann::json& extra)
{
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write memory snapshot " + path.string());
    }
    nlohmann::json header = {
        { "format", "memloom-memory" },
        { "key_dim", mem.key_dim() },
        { "policy", policy_to_json(policy) },
        { "count", mem.size() },
    };
    if (!extra.is_null()) {
        header["meta"] = extra;
    }
    out << header.dump() << '\n';
    for (const auto& e : mem.entries()) {
        out << nlohmann::json { { "key", e.key }, { "x", e.x }, { "y", e.y }, { "step", e.step } }.dump() << '\n';
    }
}

MemorySnapshot load_memory_snapshot(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ParseError("cannot open memory snapshot " + path.string());
    }
    std::string line;
    if (!std::getline(in, line)) {
        throw ParseError("memory snapshot " + path.string() + " is empty");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
        if (header.at("format") != "memloom-memory") {
            throw ParseError("not a memloom memory snapshot: " + path.string());
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("memory snapshot header: " + std::string(e.what()));
    }
    EpisodicMemory mem(header.at("key_dim").get<std::size_t>());
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            mem.append({ j.at("key").get<std::vector<double>>(), j.at("x").get<std::vector<double>>(), j.at("y").get<std::size_t>(), j.at("step").get<std::uint64_t>() });
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const ContractError& e) {
            throw ParseError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (mem.size() != header.at("count").get<std::size_t>()) {
        throw ParseError("memory snapshot " + path.string() + ": header count does not match entries");
    }
    return { std::move(mem), std::move(header) };
}

} // namespace memloom
