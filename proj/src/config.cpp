#include "memloom/config.hpp"

#include "memloom/error.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace memloom {

using nlohmann::json;

json default_config_json(Variant variant)
{
    RunConfig cfg;
    cfg.learner = default_config(variant);
    return to_json(cfg);
}

json to_json(const RunConfig& c)
{
    const auto& l = c.learner;
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["ordering"] = c.ordering;
    j["output"] = c.output.generic_string();
    j["suite"] = {
        { "n_tasks", c.suite.n_tasks },
        { "classes_per_task", c.suite.classes_per_task },
        { "dim", c.suite.dim },
        { "difficulty", c.suite.difficulty },
        { "n_train", c.suite.n_train },
        { "n_test", c.suite.n_test },
    };
    j["model"] = {
        { "hidden_dim", c.hidden_dim },
        { "key_dim", l.key_dim },
        { "normalize_keys", l.normalize_keys },
    };
    j["learner"] = {
        { "variant", to_string(l.variant) },
        { "n_tr", l.n_tr },
        { "n_re", l.n_re },
        { "batch_size", l.batch_size },
        { "lr_base", l.adam.base_lr },
        { "lr_multiplier", l.adam.multiplier },
        { "adam_beta1", l.adam.beta1 },
        { "adam_beta2", l.adam.beta2 },
        { "adam_eps", l.adam.eps },
        { "inner_lr", l.inner_lr },
        { "inner_steps", l.inner_steps },
        { "first_order", l.first_order },
        { "meta_objective", l.meta_objective },
    };
    j["adapt"] = {
        { "steps", l.adapt.steps },
        { "k", l.adapt.k },
        { "lr", l.adapt.lr },
        { "proximal", l.adapt.proximal },
        { "mode", to_string(l.adapt.mode) },
    };
    j["policy"] = {
        { "name", to_string(l.policy.kind) },
        { "rate", l.policy.rate },
        { "beta", l.policy.beta },
        { "rule", to_string(l.policy.rule) },
        { "rate_target", l.policy.rate_target },
        { "window", l.policy.window },
        { "recheck_period", l.policy.recheck_period },
        { "candidate_factor", l.policy.candidate_factor },
    };
    j["analysis"] = {
        { "forgetting_curve", c.analysis.forgetting_curve },
        { "neighbor_matrix", c.analysis.neighbor_matrix },
        { "timing", c.analysis.timing },
        { "adapt_eval", c.analysis.adapt_eval },
    };
    return json::parse(j.dump());
}

namespace {

// Overlays `src` onto `dst`, requiring every key to exist in `dst` with a
// compatible type.
void strict_merge(json& dst, const json& src, const std::string& prefix)
{
    if (!src.is_object()) {
        throw ConfigError("config" + (prefix.empty() ? std::string() : " key '" + prefix + "'") + " must be a JSON object");
    }
    for (auto it = src.begin(); it != src.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!dst.contains(it.key())) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        json& slot = dst[it.key()];
        const json& v = it.value();
        if (slot.is_object()) {
            strict_merge(slot, v, key);
        } else if (slot.is_boolean()) {
            if (!v.is_boolean()) {
                throw ConfigError("config key '" + key + "' must be a boolean");
            }
            slot = v;
        } else if (slot.is_string()) {
            if (!v.is_string()) {
                throw ConfigError("config key '" + key + "' must be a string");
            }
            slot = v;
        } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
            if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
                throw ConfigError("config key '" + key + "' must be a non-negative integer");
            }
            slot = v;
        } else if (slot.is_number()) {
            if (!v.is_number()) {
                throw ConfigError("config key '" + key + "' must be a number");
            }
            slot = v.get<double>();
        } else {
            slot = v;
        }
    }
}

template <typename T>
T get(const json& j, const char* a, const char* b)
{
    return j.at(a).at(b).get<T>();
}

RunConfig from_json(const json& j)
{
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.ordering = j.at("ordering").get<std::string>();
    c.output = j.at("output").get<std::string>();
    c.suite.n_tasks = get<std::size_t>(j, "suite", "n_tasks");
    c.suite.classes_per_task = get<std::size_t>(j, "suite", "classes_per_task");
    c.suite.dim = get<std::size_t>(j, "suite", "dim");
    c.suite.difficulty = get<double>(j, "suite", "difficulty");
    c.suite.n_train = get<std::size_t>(j, "suite", "n_train");
    c.suite.n_test = get<std::size_t>(j, "suite", "n_test");
    c.hidden_dim = get<std::size_t>(j, "model", "hidden_dim");
    auto& l = c.learner;
    l.key_dim = get<std::size_t>(j, "model", "key_dim");
    l.normalize_keys = get<bool>(j, "model", "normalize_keys");
    l.variant = parse_variant(get<std::string>(j, "learner", "variant"));
    l.n_tr = get<std::size_t>(j, "learner", "n_tr");
    l.n_re = get<std::size_t>(j, "learner", "n_re");
    l.batch_size = get<std::size_t>(j, "learner", "batch_size");
    l.adam.base_lr = get<double>(j, "learner", "lr_base");
    l.adam.multiplier = get<double>(j, "learner", "lr_multiplier");
    l.adam.beta1 = get<double>(j, "learner", "adam_beta1");
    l.adam.beta2 = get<double>(j, "learner", "adam_beta2");
    l.adam.eps = get<double>(j, "learner", "adam_eps");
    l.inner_lr = get<double>(j, "learner", "inner_lr");
    l.inner_steps = get<std::size_t>(j, "learner", "inner_steps");
    l.first_order = get<bool>(j, "learner", "first_order");
    l.meta_objective = get<bool>(j, "learner", "meta_objective");
    l.adapt.steps = get<std::size_t>(j, "adapt", "steps");
    l.adapt.k = get<std::size_t>(j, "adapt", "k");
    l.adapt.lr = get<double>(j, "adapt", "lr");
    l.adapt.proximal = get<double>(j, "adapt", "proximal");
    l.adapt.mode = parse_adapt_mode(get<std::string>(j, "adapt", "mode"));
    l.policy.kind = parse_policy_kind(get<std::string>(j, "policy", "name"));
    l.policy.rate = get<double>(j, "policy", "rate");
    l.policy.beta = get<double>(j, "policy", "beta");
    l.policy.rule = parse_diversity_rule(get<std::string>(j, "policy", "rule"));
    l.policy.rate_target = get<bool>(j, "policy", "rate_target");
    l.policy.window = get<std::size_t>(j, "policy", "window");
    l.policy.recheck_period = get<std::size_t>(j, "policy", "recheck_period");
    l.policy.candidate_factor = get<double>(j, "policy", "candidate_factor");
    c.analysis.forgetting_curve = get<bool>(j, "analysis", "forgetting_curve");
    c.analysis.neighbor_matrix = get<bool>(j, "analysis", "neighbor_matrix");
    c.analysis.timing = get<bool>(j, "analysis", "timing");
    c.analysis.adapt_eval = get<bool>(j, "analysis", "adapt_eval");
    l.adapt_eval = c.analysis.adapt_eval;
    return c;
}

} // namespace

RunConfig resolve_config(const json& file, const Overrides& o)
{
    if (!file.is_null() && !file.is_object()) {
        throw ConfigError("config must be a JSON object");
    }
    std::string variant = "meta-mbpa";
    if (o.variant) {
        variant = *o.variant;
    } else if (file.is_object() && file.contains("learner") && file["learner"].is_object() && file["learner"].contains("variant")) {
        if (!file["learner"]["variant"].is_string()) {
            throw ConfigError("config key 'learner.variant' must be a string");
        }
        variant = file["learner"]["variant"].get<std::string>();
    }
    json doc = default_config_json(parse_variant(variant));
    if (file.is_object()) {
        strict_merge(doc, file, "");
    }
    doc["learner"]["variant"] = variant;
    if (o.policy) {
        doc["policy"]["name"] = *o.policy;
    }
    if (o.memory_rate) {
        doc["policy"]["rate"] = *o.memory_rate;
    }
    if (o.ordering) {
        doc["ordering"] = *o.ordering;
    }
    if (o.seed) {
        doc["seed"] = *o.seed;
    }
    if (o.output) {
        doc["output"] = o.output->generic_string();
    }
    if (o.diversity_rule) {
        doc["policy"]["rule"] = *o.diversity_rule;
    }
    if (o.first_order) {
        doc["learner"]["first_order"] = true;
    }
    if (o.no_adapt_eval) {
        doc["analysis"]["adapt_eval"] = false;
    }
    RunConfig cfg;
    try {
        cfg = from_json(doc);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("invalid config: ") + e.what());
    }
    validate(cfg);
    return cfg;
}

RunConfig load_config(const std::optional<std::filesystem::path>& path, const Overrides& overrides)
{
    json file;
    if (path) {
        std::ifstream in(*path);
        if (!in) {
            throw ConfigError("cannot open config " + path->string());
        }
        try {
            file = json::parse(in);
        } catch (const json::exception& e) {
            throw ConfigError("config " + path->string() + " is not valid JSON: " + e.what());
        }
    }
    return resolve_config(file, overrides);
}

void validate(const RunConfig& c)
{
    const auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (c.suite.n_tasks < 2) fail("suite.n_tasks must be at least 2");
    if (c.suite.classes_per_task < 2) fail("suite.classes_per_task must be at least 2");
    if (c.suite.classes_per_task + 1 > c.suite.dim) fail("suite.dim too small for suite.classes_per_task");
    if (!(c.suite.difficulty > 0.0) || !std::isfinite(c.suite.difficulty)) fail("suite.difficulty must be positive");
    if (c.suite.n_train == 0) fail("suite.n_train must be positive");
    if (c.ordering != "i" && c.ordering != "ii" && c.ordering != "iii" && c.ordering != "iv") fail("ordering must be one of i|ii|iii|iv");
    if (c.hidden_dim == 0) fail("model.hidden_dim must be positive");
    if (c.output.empty()) fail("output must not be empty");
    const auto& l = c.learner;
    if (l.key_dim == 0) fail("model.key_dim must be positive");
    if (l.n_tr == 0) fail("learner.n_tr must be positive");
    if (l.n_re == 0) fail("learner.n_re must be positive");
    if (l.batch_size == 0) fail("learner.batch_size must be positive");
    if (!(l.adam.lr() > 0.0) || !std::isfinite(l.adam.lr())) fail("learner.lr_base * learner.lr_multiplier must be positive");
    if (!(l.adam.beta1 >= 0.0 && l.adam.beta1 < 1.0) || !(l.adam.beta2 >= 0.0 && l.adam.beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
    if (!(l.adam.eps > 0.0)) fail("learner.adam_eps must be positive");
    if (!(l.inner_lr >= 0.0) || !std::isfinite(l.inner_lr)) fail("learner.inner_lr must be non-negative");
    if (l.adapt.k == 0) fail("adapt.k must be at least 1");
    if (!(l.adapt.lr > 0.0) || !std::isfinite(l.adapt.lr)) fail("adapt.lr must be positive");
    if (!(l.adapt.proximal >= 0.0)) fail("adapt.proximal must be non-negative");
    if (!(l.policy.rate >= 0.0 && l.policy.rate <= 1.0)) fail("policy.rate must lie in [0, 1]");
    if (!(l.policy.beta > 0.0)) fail("policy.beta must be positive");
    if (l.policy.window == 0) fail("policy.window must be positive");
    if (l.policy.recheck_period == 0) fail("policy.recheck_period must be positive");
    if (!(l.policy.candidate_factor > 0.0)) fail("policy.candidate_factor must be positive");
}

Architecture architecture(const RunConfig& c)
{
    return { c.suite.dim, c.hidden_dim, c.suite.n_tasks * c.suite.classes_per_task };
}

std::vector<TaskSpec> run_suite(const RunConfig& c)
{
    SuiteConfig s = c.suite;
    s.seed = sub_seed(c.seed, "stream");
    return make_suite(s);
}

GeneratedData run_data(const RunConfig& c)
{
    const auto suite = run_suite(c);
    const auto order = canonical_ordering(suite, c.ordering);
    return generate_stream(suite, order, sub_seed(c.seed, "stream"));
}

} // namespace memloom
