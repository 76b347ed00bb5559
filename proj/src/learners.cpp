#include "memloom/learners.hpp"

#include "memloom/error.hpp"
#include "memloom/log.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace memloom {

std::string_view to_string(Variant v) noexcept
{
    switch (v) {
    case Variant::EncDec: return "enc-dec";
    case Variant::Replay: return "replay";
    case Variant::Mbpa: return "mbpa++";
    case Variant::MetaMbpa: return "meta-mbpa";
    case Variant::Mtl: return "mtl";
    }
    return "enc-dec";
}

Variant parse_variant(std::string_view name)
{
    for (Variant v : { Variant::EncDec, Variant::Replay, Variant::Mbpa, Variant::MetaMbpa, Variant::Mtl }) {
        if (name == to_string(v)) {
            return v;
        }
    }
    throw ConfigError("unknown variant '" + std::string(name) + "' (expected enc-dec|replay|mbpa++|meta-mbpa|mtl)");
}

PolicyKind default_policy(Variant v) noexcept
{
    return v == Variant::MetaMbpa ? PolicyKind::Diversity : PolicyKind::Random;
}

bool uses_memory(Variant v) noexcept
{
    return v == Variant::Replay || v == Variant::Mbpa || v == Variant::MetaMbpa;
}

LearnerConfig default_config(Variant v)
{
    LearnerConfig cfg;
    cfg.variant = v;
    cfg.policy.kind = default_policy(v);
    cfg.adapt.mode = v == Variant::MetaMbpa ? AdaptMode::Coarse : AdaptMode::PerExample;
    // One adaptation rate for both memory variants, tuned for meta-mbpa on
    // held-out seeds.
    if (uses_memory(v)) {
        cfg.adapt.lr = 0.3;
    }
    return cfg;
}

void validate(const LearnerConfig& cfg)
{
    if (cfg.n_tr == 0) {
        throw ContractError("n_tr must be positive");
    }
    if (cfg.n_re == 0) {
        throw ContractError("n_re must be positive");
    }
    if (cfg.batch_size == 0) {
        throw ContractError("batch_size must be positive");
    }
    if (!(cfg.adam.lr() > 0.0) || !std::isfinite(cfg.adam.lr())) {
        throw ContractError("learning rate must be positive");
    }
    if (!(cfg.inner_lr >= 0.0)) {
        throw ContractError("inner learning rate must be non-negative");
    }
    if (cfg.key_dim == 0) {
        throw ContractError("key_dim must be positive");
    }
    if (!(cfg.policy.rate >= 0.0 && cfg.policy.rate <= 1.0)) {
        throw ContractError("memory rate must lie in [0, 1]");
    }
    validate(cfg.adapt);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(AdamConfig cfg)
    : cfg_(cfg)
{
}

ad::ParameterVector Adam::step(const ad::ParameterVector& params, const ad::ParameterVector& grads)
{
    if (params.size() != grads.size()) {
        throw ContractError("optimizer received mismatched gradients");
    }
    if (m_.empty()) {
        for (const auto& p : params) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }
    if (m_.size() != params.size()) {
        throw ContractError("optimizer state does not match the parameter structure");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.lr();
    ad::ParameterVector out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto p = params[i].data();
        const auto g = grads[i].data();
        if (p.size() != g.size() || m_[i].size() != p.size()) {
            throw ContractError("optimizer received a gradient of the wrong shape");
        }
        std::vector<double> next(p.begin(), p.end());
        for (std::size_t j = 0; j < p.size(); ++j) {
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g[j];
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g[j] * g[j];
            next[j] -= lr * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + cfg_.eps);
        }
        out.emplace_back(params[i].shape(), std::move(next));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Gradients

ad::ParameterVector task_gradient(const PredictorParams& theta, const Batch& batch)
{
    if (batch.size() == 0) {
        throw ContractError("task update needs a non-empty batch");
    }
    ad::Tape tape;
    const auto leaves = ad::as_leaves(tape, theta.tensors());
    return ad::grad(batch_loss(leaves, batch), leaves);
}

ad::ParameterVector meta_example_gradient(const PredictorParams& theta, const Example& query, const Batch& neighbors, double inner_lr, std::size_t inner_steps, double proximal, bool first_order)
{
    ad::Tape tape;
    const auto leaves = ad::as_leaves(tape, theta.tensors());
    ad::ParameterVector adapted = leaves;
    for (std::size_t s = 0; s < inner_steps; ++s) {
        const auto inner = adaptation_loss(adapted, leaves, neighbors, proximal);
        const auto g = ad::grad(inner, adapted, !first_order);
        adapted = ad::apply_update(adapted, g, inner_lr);
    }
    const auto outer = batch_loss(adapted, single_batch(query.x, query.y));
    return ad::grad(outer, leaves);
}

namespace {

void accumulate(std::vector<std::vector<double>>& acc, const ad::ParameterVector& g)
{
    if (acc.empty()) {
        for (const auto& t : g) {
            acc.emplace_back(t.data().begin(), t.data().end());
        }
        return;
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
        const auto d = g[i].data();
        for (std::size_t j = 0; j < d.size(); ++j) {
            acc[i][j] += d[j];
        }
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Learner

Learner::Learner(LearnerConfig cfg, const Architecture& arch, std::uint64_t seed)
    : Learner(cfg, PredictorParams::xavier(arch, sub_seed(seed, "init")), KeyNetwork(arch.input_dim, cfg.key_dim, sub_seed(seed, "init/keys"), cfg.normalize_keys), seed)
{
}

Learner::Learner(LearnerConfig cfg, PredictorParams init, KeyNetwork keys, std::uint64_t seed)
    : cfg_(std::move(cfg))
    , seed_(seed)
    , keys_(std::move(keys))
    , state_ { std::move(init), EpisodicMemory(keys_.key_dim()), 0, Adam(cfg_.adam), {}, 0, 0 }
    , policy_(cfg_.policy)
    , policy_rng_(make_rng(seed, "policy"))
    , replay_rng_(make_rng(seed, "replay"))
{
    validate(cfg_);
    if (keys_.input_dim() != state_.theta.arch().input_dim) {
        throw ContractError("key network input dimension differs from the predictor's");
    }
}

void Learner::restore(PredictorParams theta, EpisodicMemory memory)
{
    if (!(theta.arch() == state_.theta.arch())) {
        throw ContractError("restored parameters have a different architecture");
    }
    if (memory.key_dim() != keys_.key_dim()) {
        throw ContractError("restored memory has key dimension " + std::to_string(memory.key_dim()) + ", expected " + std::to_string(keys_.key_dim()));
    }
    state_.theta = std::move(theta);
    state_.memory = std::move(memory);
}

bool Learner::meta_training() const noexcept
{
    return cfg_.variant == Variant::MetaMbpa && cfg_.meta_objective;
}

void Learner::adam_step(const ad::ParameterVector& grads)
{
    state_.theta = PredictorParams(state_.theta.arch(), state_.optimizer.step(state_.theta.tensors(), grads));
    ++state_.updates;
}

void Learner::task_update(const Batch& batch)
{
    adam_step(task_gradient(state_.theta, batch));
}

void Learner::replay_update()
{
    if (state_.memory.empty()) {
        throw ContractError("replay needs a non-empty memory");
    }
    const auto idx = state_.memory.sample_uniform(cfg_.n_re, replay_rng_);
    task_update(state_.memory.batch(idx));
}

ad::ParameterVector Learner::meta_gradient(std::span<const Example* const> batch)
{
    std::vector<std::vector<double>> acc;
    for (const Example* e : batch) {
        const auto idx = state_.memory.knn(keys_.encode(e->x), cfg_.adapt.k);
        if (idx.empty()) {
            accumulate(acc, task_gradient(state_.theta, single_batch(e->x, e->y)));
            continue;
        }
        for (auto i : idx) {
            if (state_.memory[i].y == e->y && state_.memory[i].x == e->x) {
                ++state_.self_neighbor_hits;
                break;
            }
        }
        accumulate(acc, meta_example_gradient(state_.theta, *e, state_.memory.batch(idx), cfg_.inner_lr, cfg_.inner_steps, cfg_.adapt.proximal, cfg_.first_order));
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    ad::ParameterVector out;
    const auto& shapes = state_.theta.tensors();
    for (std::size_t i = 0; i < acc.size(); ++i) {
        for (auto& v : acc[i]) {
            v *= inv;
        }
        out.emplace_back(shapes[i].shape(), std::move(acc[i]));
    }
    return out;
}

void Learner::meta_task_update(std::span<const Example> batch)
{
    if (batch.empty()) {
        throw ContractError("meta-task update needs a non-empty batch");
    }
    std::vector<const Example*> ptrs;
    ptrs.reserve(batch.size());
    for (const auto& e : batch) {
        ptrs.push_back(&e);
    }
    if (state_.memory.empty() || cfg_.inner_lr == 0.0 || cfg_.inner_steps == 0) {
        // The adapted model equals theta, so the objective is the task loss.
        task_update(make_batch(std::span<const Example* const>(ptrs)));
        return;
    }
    adam_step(meta_gradient(ptrs));
}

void Learner::meta_replay_update()
{
    if (state_.memory.empty()) {
        throw ContractError("meta-replay needs a non-empty memory");
    }
    const auto idx = state_.memory.sample_uniform(cfg_.n_re, replay_rng_);
    std::vector<Example> samples;
    samples.reserve(idx.size());
    for (auto i : idx) {
        samples.push_back({ state_.memory[i].x, state_.memory[i].y, {} });
    }
    if (cfg_.inner_lr == 0.0 || cfg_.inner_steps == 0) {
        task_update(make_batch(samples));
        return;
    }
    std::vector<const Example*> ptrs;
    for (const auto& e : samples) {
        ptrs.push_back(&e);
    }
    adam_step(meta_gradient(ptrs));
}

void Learner::write_pending(std::span<const Example* const> pending, std::uint64_t first_step)
{
    if (!uses_memory(cfg_.variant) || pending.empty()) {
        return;
    }
    const Batch batch = make_batch(pending);
    if (cfg_.policy.kind == PolicyKind::Forgettable) {
        const auto labels = predict_labels(state_.theta.tensors(), batch.inputs);
        const double p = std::min(1.0, cfg_.policy.candidate_factor * cfg_.policy.rate);
        std::uniform_real_distribution<double> u(0.0, 1.0);
        for (std::size_t i = 0; i < pending.size(); ++i) {
            if (u(policy_rng_) < p) {
                tracker_->add(first_step + i, pending[i]->x, pending[i]->y, labels[i] == pending[i]->y);
            }
        }
        return;
    }
    std::vector<double> conf;
    if (cfg_.policy.kind == PolicyKind::Uncertainty) {
        conf = label_confidence(state_.theta.tensors(), batch);
    }
    for (std::size_t i = 0; i < pending.size(); ++i) {
        MemoryEntry entry { keys_.encode(pending[i]->x), pending[i]->x, pending[i]->y, first_step + i };
        policy_.maybe_write(state_.memory, std::move(entry), policy_rng_, conf.empty() ? 1.0 : conf[i]);
    }
}

void Learner::recheck_candidates()
{
    if (!tracker_ || tracker_->candidates().empty()) {
        return;
    }
    std::vector<Example> cands;
    std::vector<std::uint64_t> ids;
    for (const auto& c : tracker_->candidates()) {
        cands.push_back({ c.x, c.y, {} });
        ids.push_back(c.id);
    }
    const auto labels = predict_labels(state_.theta.tensors(), make_batch(cands).inputs);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const std::size_t events = tracker_->recheck(ids[i], labels[i] == cands[i].y);
        MemoryEntry entry { keys_.encode(cands[i].x), cands[i].x, cands[i].y, ids[i] };
        if (policy_.maybe_write(state_.memory, std::move(entry), policy_rng_, 1.0, events)) {
            tracker_->remove(ids[i]);
        }
    }
}

void Learner::train_stream(const TaskStream& stream, const Observer& observer)
{
    if (stream.examples.empty()) {
        throw ContractError("cannot train on an empty stream");
    }
    const std::size_t dim = state_.theta.arch().input_dim;
    for (std::size_t i = 0; i < stream.examples.size(); ++i) {
        if (stream.examples[i].x.size() != dim) {
            throw ContractError("stream example " + std::to_string(i + 1) + " has dimension " + std::to_string(stream.examples[i].x.size()) + ", model expects " + std::to_string(dim));
        }
    }
    const std::uint64_t base = state_.step;
    const std::uint64_t total = base + stream.examples.size();
    if (uses_memory(cfg_.variant) && cfg_.policy.kind == PolicyKind::Forgettable && !tracker_) {
        const double cap = std::ceil(cfg_.policy.candidate_factor * cfg_.policy.rate * static_cast<double>(stream.examples.size()));
        tracker_.emplace(static_cast<std::size_t>(std::max(1.0, cap)));
    }
    std::vector<std::uint64_t> marks = observer.at;
    std::sort(marks.begin(), marks.end());
    const bool lifelong = cfg_.variant != Variant::Mtl;

    std::vector<const Example*> pending;
    pending.reserve(cfg_.batch_size);
    std::uint64_t first_pending = base + 1;
    for (std::size_t i = 0; i < stream.examples.size(); ++i) {
        const std::uint64_t step = base + i + 1;
        state_.step = step;
        if (pending.empty()) {
            first_pending = step;
        }
        pending.push_back(&stream.examples[i]);
        policy_.set_steps_seen(step);
        const bool replay_now = lifelong && step % cfg_.n_tr == 0;
        const bool marked = std::binary_search(marks.begin(), marks.end(), step);
        if (pending.size() < cfg_.batch_size && !replay_now && !marked && step != total) {
            continue;
        }
        try {
            if (meta_training()) {
                std::vector<Example> copy;
                copy.reserve(pending.size());
                for (const Example* e : pending) {
                    copy.push_back({ e->x, e->y, {} });
                }
                meta_task_update(copy);
            } else {
                task_update(make_batch(std::span<const Example* const>(pending)));
            }
            if (replay_now) {
                ReplayEvent ev { step, state_.memory.size(), false };
                if (state_.memory.empty()) {
                    ev.skipped = true;
                    log::info("replay at step " + std::to_string(step) + " skipped: memory is empty");
                } else if (meta_training()) {
                    meta_replay_update();
                } else {
                    replay_update();
                }
                state_.replay_events.push_back(ev);
                log::info("replay event at step " + std::to_string(step) + ", |M| = " + std::to_string(state_.memory.size()));
            }
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " at stream step " + std::to_string(step));
        }
        write_pending(pending, first_pending);
        pending.clear();
        if (tracker_ && step % cfg_.policy.recheck_period == 0) {
            recheck_candidates();
        }
        if (marked && observer.callback) {
            observer.callback(step, *this);
        }
    }
}

Evaluation Learner::evaluate(std::span<const TestSet> tests) const
{
    const bool adapt = cfg_.adapt_eval && (cfg_.variant == Variant::Mbpa || cfg_.variant == Variant::MetaMbpa);
    return evaluate(tests, cfg_.adapt, adapt);
}

Evaluation Learner::evaluate(std::span<const TestSet> tests, const AdaptConfig& adapt, bool adapt_eval) const
{
    Evaluation out;
    Rng rng = make_rng(seed_, "adaptation");
    const auto score = [](const TestSet& t, std::vector<std::size_t> labels) {
        TaskEvaluation r;
        std::size_t hit = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            hit += labels[i] == t.examples[i].y ? 1 : 0;
        }
        r.accuracy = labels.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(labels.size());
        r.predictions = std::move(labels);
        return r;
    };
    if (!adapt_eval) {
        for (const auto& t : tests) {
            out.tasks.push_back(score(t, t.examples.empty() ? std::vector<std::size_t> {} : predict_labels(state_.theta.tensors(), make_batch(t.examples).inputs)));
        }
        return out;
    }
    if (adapt.mode == AdaptMode::Coarse && !state_.memory.empty()) {
        // One adapted model shared by every test example.
        validate(adapt);
        const PredictorParams adapted = coarse_adapt(state_.theta, state_.memory, adapt, rng);
        for (const auto& t : tests) {
            out.tasks.push_back(score(t, t.examples.empty() ? std::vector<std::size_t> {} : predict_labels(adapted.tensors(), make_batch(t.examples).inputs)));
        }
        return out;
    }
    for (const auto& t : tests) {
        auto pred = predict_with_adaptation(state_.theta, state_.memory, keys_, t.examples, adapt, rng);
        out.fallback = out.fallback || pred.fallback;
        auto r = score(t, std::move(pred.labels));
        r.neighbors = std::move(pred.neighbors);
        out.tasks.push_back(std::move(r));
    }
    return out;
}

} // namespace memloom
