#include "memloom/models.hpp"

#include "memloom/error.hpp"
#include "memloom/random.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <string>

namespace memloom {

// ---------------------------------------------------------------------------
// Batches

Batch make_batch(std::span<const Example> examples)
{
    std::vector<const Example*> ptrs;
    ptrs.reserve(examples.size());
    for (const auto& e : examples) {
        ptrs.push_back(&e);
    }
    return make_batch(std::span<const Example* const>(ptrs));
}

Batch make_batch(std::span<const Example* const> examples)
{
    if (examples.empty()) {
        throw ContractError("empty batch");
    }
    const std::size_t d = examples.front()->x.size();
    std::vector<double> flat;
    flat.reserve(examples.size() * d);
    Batch b;
    b.labels.reserve(examples.size());
    for (const Example* e : examples) {
        if (e->x.size() != d) {
            throw ContractError("batch rows have inconsistent dimensions");
        }
        flat.insert(flat.end(), e->x.begin(), e->x.end());
        b.labels.push_back(e->y);
    }
    b.inputs = ad::Tensor::matrix(examples.size(), d, std::move(flat));
    return b;
}

Batch single_batch(std::span<const double> x, std::size_t y)
{
    Batch b;
    b.inputs = ad::Tensor::matrix(1, x.size(), std::vector<double>(x.begin(), x.end()));
    b.labels = { y };
    return b;
}

// ---------------------------------------------------------------------------
// Predictor

namespace {

std::vector<ad::Shape> layer_shapes(const Architecture& a)
{
    return {
        { a.input_dim, a.hidden_dim }, { a.hidden_dim },
        { a.hidden_dim, a.hidden_dim }, { a.hidden_dim },
        { a.hidden_dim, a.num_classes }, { a.num_classes },
    };
}

void check_arch(const Architecture& a)
{
    if (a.input_dim == 0 || a.hidden_dim == 0 || a.num_classes == 0) {
        throw ContractError("architecture dimensions must be positive");
    }
}

} // namespace

std::size_t parameter_count(const Architecture& a) noexcept
{
    return a.input_dim * a.hidden_dim + a.hidden_dim + a.hidden_dim * a.hidden_dim + a.hidden_dim + a.hidden_dim * a.num_classes + a.num_classes;
}

PredictorParams::PredictorParams(Architecture arch, ad::ParameterVector tensors)
    : arch_(arch)
    , tensors_(ad::detach_all(tensors))
{
    check_arch(arch_);
    const auto shapes = layer_shapes(arch_);
    if (tensors_.size() != shapes.size()) {
        throw ContractError("predictor expects 6 parameter tensors");
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (tensors_[i].shape() != shapes[i]) {
            throw ContractError("predictor tensor " + std::to_string(i) + " has the wrong shape");
        }
        for (double v : tensors_[i].data()) {
            if (!std::isfinite(v)) {
                throw NumericError("non-finite predictor parameter");
            }
        }
    }
}

PredictorParams PredictorParams::xavier(const Architecture& arch, std::uint64_t seed)
{
    check_arch(arch);
    Rng rng(seed);
    ad::ParameterVector t;
    for (const auto& s : layer_shapes(arch)) {
        if (s.size() == 1) {
            t.push_back(ad::Tensor::zeros(s));
            continue;
        }
        const double a = std::sqrt(6.0 / static_cast<double>(s[0] + s[1]));
        std::uniform_real_distribution<double> u(-a, a);
        std::vector<double> w(s[0] * s[1]);
        for (auto& v : w) {
            v = u(rng);
        }
        t.push_back(ad::Tensor(s, std::move(w)));
    }
    return { arch, std::move(t) };
}

PredictorParams PredictorParams::zeros(const Architecture& arch)
{
    check_arch(arch);
    ad::ParameterVector t;
    for (const auto& s : layer_shapes(arch)) {
        t.push_back(ad::Tensor::zeros(s));
    }
    return { arch, std::move(t) };
}

PredictorParams PredictorParams::from_flat(const Architecture& arch, std::span<const double> flat)
{
    check_arch(arch);
    if (flat.size() != memloom::parameter_count(arch)) {
        throw ContractError("flat parameter vector has " + std::to_string(flat.size()) + " values, architecture needs " + std::to_string(memloom::parameter_count(arch)));
    }
    ad::ParameterVector t;
    std::size_t off = 0;
    for (const auto& s : layer_shapes(arch)) {
        std::size_t n = 1;
        for (auto d : s) {
            n *= d;
        }
        t.push_back(ad::Tensor(s, std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off), flat.begin() + static_cast<std::ptrdiff_t>(off + n))));
        off += n;
    }
    return { arch, std::move(t) };
}

std::size_t PredictorParams::parameter_count() const noexcept { return memloom::parameter_count(arch_); }

std::vector<double> PredictorParams::flatten() const
{
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& t : tensors_) {
        flat.insert(flat.end(), t.data().begin(), t.data().end());
    }
    return flat;
}

bool PredictorParams::operator==(const PredictorParams& other) const
{
    return arch_ == other.arch_ && flatten() == other.flatten();
}

ad::Tensor log_probs(const ad::ParameterVector& p, const ad::Tensor& inputs)
{
    if (p.size() != 6) {
        throw ContractError("predictor expects 6 parameter tensors");
    }
    if (inputs.rank() != 2 || inputs.shape()[1] != p[0].shape()[0]) {
        throw ContractError("input dimension does not match the predictor");
    }
    const ad::Tensor h1 = ad::tanh(ad::add(ad::matmul(inputs, p[0]), p[1]));
    const ad::Tensor h2 = ad::tanh(ad::add(ad::matmul(h1, p[2]), p[3]));
    return ad::log_softmax(ad::add(ad::matmul(h2, p[4]), p[5]));
}

ad::Tensor batch_loss(const ad::ParameterVector& params, const Batch& batch)
{
    return ad::nll(log_probs(params, batch.inputs), batch.labels);
}

std::vector<double> predict(const PredictorParams& theta, std::span<const double> x)
{
    if (x.size() != theta.arch().input_dim) {
        throw ContractError("input has dimension " + std::to_string(x.size()) + ", predictor expects " + std::to_string(theta.arch().input_dim));
    }
    const auto lp = log_probs(theta.tensors(), ad::Tensor::matrix(1, x.size(), std::vector<double>(x.begin(), x.end())));
    return { lp.data().begin(), lp.data().end() };
}

double task_loss(const PredictorParams& theta, std::span<const double> x, std::size_t y)
{
    if (y >= theta.arch().num_classes) {
        throw ContractError("label " + std::to_string(y) + " out of range");
    }
    return -predict(theta, x)[y];
}

std::vector<std::size_t> predict_labels(const ad::ParameterVector& params, const ad::Tensor& inputs)
{
    const auto lp = log_probs(params, inputs);
    const std::size_t n = lp.shape()[0];
    const std::size_t c = lp.shape()[1];
    std::vector<std::size_t> out(n);
    const auto d = lp.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (d[i * c + j] > d[i * c + best]) {
                best = j;
            }
        }
        out[i] = best;
    }
    return out;
}

std::vector<double> label_confidence(const ad::ParameterVector& params, const Batch& batch)
{
    const auto lp = log_probs(params, batch.inputs);
    const std::size_t c = lp.shape()[1];
    std::vector<double> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        out[i] = std::exp(lp[i * c + batch.labels[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Key network

KeyNetwork::KeyNetwork(std::size_t input_dim, std::size_t key_dim, std::uint64_t seed, bool normalize)
    : input_dim_(input_dim)
    , key_dim_(key_dim)
    , seed_(seed)
    , normalize_(normalize)
{
    if (input_dim == 0 || key_dim == 0) {
        throw ContractError("key network dimensions must be positive");
    }
    Rng rng(seed);
    // Entries ~ N(0, 1/key_dim) so squared distances are preserved in expectation.
    std::normal_distribution<double> n(0.0, 1.0 / std::sqrt(static_cast<double>(key_dim)));
    weights_.resize(key_dim * input_dim);
    for (auto& w : weights_) {
        w = n(rng);
    }
}

std::vector<double> KeyNetwork::encode(std::span<const double> x) const
{
    if (x.size() != input_dim_) {
        throw ContractError("key network expects inputs of dimension " + std::to_string(input_dim_) + ", got " + std::to_string(x.size()));
    }
    std::vector<double> key(key_dim_, 0.0);
    for (std::size_t r = 0; r < key_dim_; ++r) {
        const double* row = weights_.data() + r * input_dim_;
        double s = 0.0;
        for (std::size_t c = 0; c < input_dim_; ++c) {
            s += row[c] * x[c];
        }
        key[r] = s;
    }
    if (normalize_) {
        double norm = 0.0;
        for (double v : key) {
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm > 0.0) {
            for (double& v : key) {
                v /= norm;
            }
        }
    }
    return key;
}

nlohmann::json KeyNetwork::to_json() const
{
    return {
        { "input_dim", input_dim_ },
        { "key_dim", key_dim_ },
        { "seed", seed_ },
        { "normalize", normalize_ },
        { "weights", weights_ },
    };
}

KeyNetwork KeyNetwork::from_json(const nlohmann::json& j)
{
    KeyNetwork k;
    try {
        k.input_dim_ = j.at("input_dim").get<std::size_t>();
        k.key_dim_ = j.at("key_dim").get<std::size_t>();
        k.seed_ = j.at("seed").get<std::uint64_t>();
        k.normalize_ = j.at("normalize").get<bool>();
        k.weights_ = j.at("weights").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("key network: ") + e.what());
    }
    if (k.weights_.size() != k.input_dim_ * k.key_dim_) {
        throw ParseError("key network: weight count does not match dimensions");
    }
    return k;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const std::filesystem::path& path, const PredictorParams& theta, std::uint64_t seed, const nlohmann::json& meta)
{
    nlohmann::json j;
    j["format"] = "memloom-checkpoint";
    j["version"] = 1;
    j["input_dim"] = theta.arch().input_dim;
    j["hidden_dim"] = theta.arch().hidden_dim;
    j["num_classes"] = theta.arch().num_classes;
    j["seed"] = seed;
    j["parameter_count"] = theta.parameter_count();
    if (!meta.is_null()) {
        j["meta"] = meta;
    }
    j["parameters"] = theta.flatten();
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path.string());
    }
    out << j.dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ParseError("cannot open checkpoint " + path.string());
    }
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.at("format") != "memloom-checkpoint") {
            throw ParseError("not a memloom checkpoint: " + path.string());
        }
        Architecture arch { j.at("input_dim").get<std::size_t>(), j.at("hidden_dim").get<std::size_t>(), j.at("num_classes").get<std::size_t>() };
        const auto flat = j.at("parameters").get<std::vector<double>>();
        return { PredictorParams::from_flat(arch, flat), j.at("seed").get<std::uint64_t>(), j.value("meta", nlohmann::json {}) };
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    } catch (const ContractError& e) {
        throw ParseError("checkpoint " + path.string() + ": " + e.what());
    }
}

} // namespace memloom
