#include "memloom/autodiff.hpp"

#include "memloom/error.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>

namespace memloom::ad {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

std::size_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t { 1 }, std::multiplies<> {});
}

std::string shape_str(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        out += (i ? "," : "") + std::to_string(s[i]);
    }
    return out + "]";
}

// 2-D view used for broadcasting: scalar -> 1x1, [m] -> 1xm.
struct View {
    std::size_t rows;
    std::size_t cols;
};

View view_of(const Shape& s)
{
    switch (s.size()) {
    case 0:
        return { 1, 1 };
    case 1:
        return { 1, s[0] };
    case 2:
        return { s[0], s[1] };
    default:
        throw ContractError("tensors of rank > 2 are not supported, got " + shape_str(s));
    }
}

void check_finite(std::span<const double> values, OpKind kind)
{
    // v - v is NaN exactly for inf and NaN; four lanes keep the loop vectorizable.
    double acc[4] = { 0.0, 0.0, 0.0, 0.0 };
    const std::size_t n = values.size();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        for (std::size_t k = 0; k < 4; ++k) {
            acc[k] += values[i + k] - values[i + k];
        }
    }
    for (; i < n; ++i) {
        acc[0] += values[i] - values[i];
    }
    if (acc[0] != 0.0 || acc[1] != 0.0 || acc[2] != 0.0 || acc[3] != 0.0) {
        throw NumericError("non-finite value produced by op '" + std::string(op_name(kind)) + "'");
    }
}

Tape* common_tape(std::initializer_list<const Tensor*> inputs)
{
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
        if (t->tape() == nullptr) {
            continue;
        }
        if (tape != nullptr && tape != t->tape()) {
            throw ContractError("operands recorded on different tapes");
        }
        tape = t->tape();
    }
    return tape;
}

Tensor finish(Node node, Shape shape, std::vector<double> values)
{
    check_finite(values, node.kind);
    Tensor out(std::move(shape), std::move(values));
    Tape* tape = nullptr;
    for (const auto& in : node.inputs) {
        if (in.tape() != nullptr) {
            tape = in.tape();
        }
    }
    if (tape == nullptr) {
        return out;
    }
    node.value = std::move(out);
    return tape->record(std::move(node));
}

Node make_node(OpKind kind, std::vector<Tensor> inputs)
{
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    return n;
}

struct Broadcast {
    Shape shape;
    View out;
    View a;
    View b;
};

Broadcast broadcast_shapes(const Tensor& a, const Tensor& b, const char* op)
{
    const View va = view_of(a.shape());
    const View vb = view_of(b.shape());
    if (a.shape() == b.shape()) {
        return { a.shape(), va, va, vb };
    }
    auto compatible = [](std::size_t x, std::size_t y) { return x == y || x == 1 || y == 1; };
    if (!compatible(va.rows, vb.rows) || !compatible(va.cols, vb.cols)) {
        throw ContractError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " do not broadcast");
    }
    const View out { std::max(va.rows, vb.rows), std::max(va.cols, vb.cols) };
    Shape shape;
    if (va.rows == out.rows && va.cols == out.cols) {
        shape = a.shape();
    } else if (vb.rows == out.rows && vb.cols == out.cols) {
        shape = b.shape();
    } else {
        shape = { out.rows, out.cols };
    }
    return { std::move(shape), out, va, vb };
}

template <class F>
std::vector<double> elementwise(const Tensor& a, const Tensor& b, const Broadcast& bc, F f)
{
    std::vector<double> out(bc.out.rows * bc.out.cols);
    const auto da = a.data();
    const auto db = b.data();
    if (a.shape() == b.shape()) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = f(da[i], db[i]);
        }
        return out;
    }
    for (std::size_t r = 0; r < bc.out.rows; ++r) {
        const std::size_t ra = bc.a.rows == 1 ? 0 : r;
        const std::size_t rb = bc.b.rows == 1 ? 0 : r;
        for (std::size_t c = 0; c < bc.out.cols; ++c) {
            const std::size_t ca = bc.a.cols == 1 ? 0 : c;
            const std::size_t cb = bc.b.cols == 1 ? 0 : c;
            out[r * bc.out.cols + c] = f(da[ra * bc.a.cols + ca], db[rb * bc.b.cols + cb]);
        }
    }
    return out;
}

template <class F>
std::vector<double> unary(const Tensor& a, F f)
{
    std::vector<double> out(a.size());
    const auto d = a.data();
    std::transform(d.begin(), d.end(), out.begin(), f);
    return out;
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor()
    : shape_ {}
    , data_(std::make_shared<const std::vector<double>>(1, 0.0))
{
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape))
{
    if (shape_.size() > 2) {
        throw ContractError("tensors of rank > 2 are not supported, got " + shape_str(shape_));
    }
    if (element_count(shape_) != data.size()) {
        throw ContractError("shape " + shape_str(shape_) + " does not match " + std::to_string(data.size()) + " values");
    }
    data_ = std::make_shared<const std::vector<double>>(std::move(data));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape {}, { value }); }
Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value)
{
    const std::size_t n = element_count(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
{
    return Tensor(Shape { rows, cols }, std::move(data));
}

Tensor Tensor::vector(std::vector<double> data)
{
    const std::size_t n = data.size();
    return Tensor(Shape { n }, std::move(data));
}

double Tensor::item() const
{
    if (size() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape_));
    }
    return (*data_)[0];
}

Tensor Tensor::detach() const
{
    Tensor t = *this;
    t.tape_ = nullptr;
    t.node_ = 0;
    return t;
}

// ---------------------------------------------------------------------------
// Tape

std::string_view op_name(OpKind kind) noexcept
{
    switch (kind) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Mul: return "mul";
    case OpKind::Scale: return "scale";
    case OpKind::Tanh: return "tanh";
    case OpKind::Relu: return "relu";
    case OpKind::Exp: return "exp";
    case OpKind::LogSoftmax: return "log_softmax";
    case OpKind::Nll: return "nll";
    case OpKind::Sum: return "sum";
    case OpKind::SumTo: return "sum_to";
    case OpKind::BroadcastTo: return "broadcast_to";
    case OpKind::SquaredNorm: return "squared_norm";
    }
    return "unknown";
}

Tensor Tape::leaf(const Tensor& value)
{
    check_finite(value.data(), OpKind::Leaf);
    Node n;
    n.kind = OpKind::Leaf;
    n.value = value.detach();
    return record(std::move(n));
}

Tensor Tape::handle(std::size_t id)
{
    Tensor h = nodes_.at(id).value;
    h.tape_ = this;
    h.node_ = id;
    return h;
}

Tensor Tape::record(Node node)
{
    Tensor handle = node.value;
    handle.tape_ = this;
    handle.node_ = nodes_.size();
    nodes_.push_back(std::move(node));
    return handle;
}

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b)
{
    common_tape({ &a, &b });
    if (a.rank() != 2 || b.rank() != 2) {
        throw ContractError("matmul expects rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
    const std::size_t ka = trans_a ? a.shape()[0] : a.shape()[1];
    const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
    const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
    if (ka != kb) {
        throw ContractError("matmul inner dimensions differ: " + shape_str(a.shape()) + (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
    }
    std::vector<double> out(m * n);
    const ConstMap A(a.data().data(), static_cast<Eigen::Index>(a.shape()[0]), static_cast<Eigen::Index>(a.shape()[1]));
    const ConstMap B(b.data().data(), static_cast<Eigen::Index>(b.shape()[0]), static_cast<Eigen::Index>(b.shape()[1]));
    MutMap C(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (!trans_a && !trans_b) {
        C.noalias() = A * B;
    } else if (trans_a && !trans_b) {
        C.noalias() = A.transpose() * B;
    } else if (!trans_a && trans_b) {
        C.noalias() = A * B.transpose();
    } else {
        C.noalias() = A.transpose() * B.transpose();
    }
    Node node = make_node(OpKind::MatMul, { a, b });
    node.trans_a = trans_a;
    node.trans_b = trans_b;
    return finish(std::move(node), Shape { m, n }, std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b)
{
    common_tape({ &a, &b });
    Broadcast bc = broadcast_shapes(a, b, "add");
    auto out = elementwise(a, b, bc, [](double x, double y) { return x + y; });
    return finish(make_node(OpKind::Add, { a, b }), std::move(bc.shape), std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    common_tape({ &a, &b });
    Broadcast bc = broadcast_shapes(a, b, "mul");
    auto out = elementwise(a, b, bc, [](double x, double y) { return x * y; });
    return finish(make_node(OpKind::Mul, { a, b }), std::move(bc.shape), std::move(out));
}

Tensor scale(const Tensor& a, double factor)
{
    auto out = unary(a, [factor](double x) { return x * factor; });
    Node node = make_node(OpKind::Scale, { a });
    node.scalar = factor;
    return finish(std::move(node), a.shape(), std::move(out));
}

Tensor tanh(const Tensor& a)
{
    return finish(make_node(OpKind::Tanh, { a }), a.shape(), unary(a, [](double x) { return std::tanh(x); }));
}

Tensor relu(const Tensor& a)
{
    return finish(make_node(OpKind::Relu, { a }), a.shape(), unary(a, [](double x) { return x > 0.0 ? x : 0.0; }));
}

Tensor exp(const Tensor& a)
{
    return finish(make_node(OpKind::Exp, { a }), a.shape(), unary(a, [](double x) { return std::exp(x); }));
}

Tensor log_softmax(const Tensor& logits)
{
    if (logits.rank() != 2) {
        throw ContractError("log_softmax expects [n, C], got " + shape_str(logits.shape()));
    }
    const std::size_t n = logits.shape()[0];
    const std::size_t c = logits.shape()[1];
    const auto d = logits.data();
    std::vector<double> out(d.size());
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = d.data() + r * c;
        const double mx = *std::max_element(row, row + c);
        double s = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            s += std::exp(row[j] - mx);
        }
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < c; ++j) {
            out[r * c + j] = row[j] - lse;
        }
    }
    return finish(make_node(OpKind::LogSoftmax, { logits }), logits.shape(), std::move(out));
}

Tensor nll(const Tensor& log_probs, std::span<const std::size_t> labels)
{
    if (log_probs.rank() != 2) {
        throw ContractError("nll expects [n, C] log-probabilities, got " + shape_str(log_probs.shape()));
    }
    const std::size_t n = log_probs.shape()[0];
    const std::size_t c = log_probs.shape()[1];
    if (labels.size() != n) {
        throw ContractError("nll: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) + " rows");
    }
    if (n == 0) {
        throw ContractError("nll of an empty batch");
    }
    const auto d = log_probs.data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= c) {
            throw ContractError("label " + std::to_string(labels[i]) + " out of range for " + std::to_string(c) + " classes");
        }
        total += d[i * c + labels[i]];
    }
    Node node = make_node(OpKind::Nll, { log_probs });
    node.labels = std::make_shared<const std::vector<std::size_t>>(labels.begin(), labels.end());
    return finish(std::move(node), Shape {}, { -total / static_cast<double>(n) });
}

Tensor sum(const Tensor& a)
{
    const auto d = a.data();
    const double s = std::accumulate(d.begin(), d.end(), 0.0);
    return finish(make_node(OpKind::Sum, { a }), Shape {}, { s });
}

Tensor sum_to(const Tensor& a, const Shape& target)
{
    if (a.shape() == target) {
        return a;
    }
    const View src = view_of(a.shape());
    const View dst = view_of(target);
    if ((dst.rows != src.rows && dst.rows != 1) || (dst.cols != src.cols && dst.cols != 1)) {
        throw ContractError("sum_to: cannot reduce " + shape_str(a.shape()) + " to " + shape_str(target));
    }
    std::vector<double> out(dst.rows * dst.cols, 0.0);
    const auto d = a.data();
    for (std::size_t r = 0; r < src.rows; ++r) {
        for (std::size_t c = 0; c < src.cols; ++c) {
            out[(dst.rows == 1 ? 0 : r) * dst.cols + (dst.cols == 1 ? 0 : c)] += d[r * src.cols + c];
        }
    }
    Node node = make_node(OpKind::SumTo, { a });
    node.target = target;
    return finish(std::move(node), target, std::move(out));
}

Tensor broadcast_to(const Tensor& a, const Shape& target)
{
    if (a.shape() == target) {
        return a;
    }
    const View src = view_of(a.shape());
    const View dst = view_of(target);
    if ((src.rows != dst.rows && src.rows != 1) || (src.cols != dst.cols && src.cols != 1)) {
        throw ContractError("broadcast_to: cannot expand " + shape_str(a.shape()) + " to " + shape_str(target));
    }
    std::vector<double> out(dst.rows * dst.cols);
    const auto d = a.data();
    for (std::size_t r = 0; r < dst.rows; ++r) {
        for (std::size_t c = 0; c < dst.cols; ++c) {
            out[r * dst.cols + c] = d[(src.rows == 1 ? 0 : r) * src.cols + (src.cols == 1 ? 0 : c)];
        }
    }
    Node node = make_node(OpKind::BroadcastTo, { a });
    node.target = target;
    return finish(std::move(node), target, std::move(out));
}

Tensor squared_norm(const Tensor& a)
{
    double s = 0.0;
    for (double v : a.data()) {
        s += v * v;
    }
    return finish(make_node(OpKind::SquaredNorm, { a }), Shape {}, { s });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

// ---------------------------------------------------------------------------
// Backward

namespace {

// Gradients of node inputs given the output adjoint g. `out` is the node's
// forward value (with a tape handle when building a differentiable graph).
std::vector<std::optional<Tensor>> backward(const Node& n, const std::vector<Tensor>& in, const Tensor& out, const Tensor& g, const std::vector<bool>& need)
{
    std::vector<std::optional<Tensor>> res(in.size());
    switch (n.kind) {
    case OpKind::Leaf:
        break;
    case OpKind::MatMul: {
        const Tensor& a = in[0];
        const Tensor& b = in[1];
        if (need[0]) {
            res[0] = n.trans_a ? matmul(b, g, n.trans_b, true) : matmul(g, b, false, !n.trans_b);
        }
        if (need[1]) {
            res[1] = n.trans_b ? matmul(g, a, true, n.trans_a) : matmul(a, g, !n.trans_a, false);
        }
        break;
    }
    case OpKind::Add:
        for (std::size_t i = 0; i < 2; ++i) {
            if (need[i]) {
                res[i] = sum_to(g, in[i].shape());
            }
        }
        break;
    case OpKind::Mul:
        if (need[0]) {
            res[0] = sum_to(mul(g, in[1]), in[0].shape());
        }
        if (need[1]) {
            res[1] = sum_to(mul(g, in[0]), in[1].shape());
        }
        break;
    case OpKind::Scale:
        res[0] = scale(g, n.scalar);
        break;
    case OpKind::Tanh: {
        // 1 - y^2
        const Tensor slope = add(scale(mul(out, out), -1.0), Tensor::scalar(1.0));
        res[0] = mul(g, slope);
        break;
    }
    case OpKind::Relu: {
        const auto x = in[0].data();
        std::vector<double> mask(x.size());
        std::transform(x.begin(), x.end(), mask.begin(), [](double v) { return v > 0.0 ? 1.0 : 0.0; });
        res[0] = mul(g, Tensor(in[0].shape(), std::move(mask)));
        break;
    }
    case OpKind::Exp:
        res[0] = mul(g, out);
        break;
    case OpKind::LogSoftmax: {
        // g - softmax * rowsum(g)
        const Shape col { out.shape()[0], 1 };
        const Tensor row_total = sum_to(g, col);
        res[0] = sub(g, mul(exp(out), row_total));
        break;
    }
    case OpKind::Nll: {
        const Shape& s = in[0].shape();
        std::vector<double> w(s[0] * s[1], 0.0);
        const double inv = -1.0 / static_cast<double>(s[0]);
        for (std::size_t i = 0; i < s[0]; ++i) {
            w[i * s[1] + (*n.labels)[i]] = inv;
        }
        res[0] = mul(Tensor(s, std::move(w)), g);
        break;
    }
    case OpKind::Sum:
        res[0] = broadcast_to(g, in[0].shape());
        break;
    case OpKind::SumTo:
        res[0] = broadcast_to(g, in[0].shape());
        break;
    case OpKind::BroadcastTo:
        res[0] = sum_to(g, in[0].shape());
        break;
    case OpKind::SquaredNorm:
        res[0] = scale(mul(in[0], g), 2.0);
        break;
    }
    return res;
}

} // namespace

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph)
{
    if (loss.size() != 1) {
        throw ContractError("grad: loss must be a scalar");
    }
    Tape* tape = loss.tape();
    if (tape == nullptr) {
        throw ContractError("grad: loss is not recorded on a tape (detached tensors cannot be differentiated)");
    }
    for (const Tensor& w : wrt) {
        if (w.tape() != tape) {
            throw ContractError("grad: wrt tensor is not on the loss's tape");
        }
    }

    const std::size_t root = loss.node();
    // Only nodes that can reach a requested leaf need adjoints.
    std::vector<char> relevant(root + 1, 0);
    for (const Tensor& w : wrt) {
        relevant[w.node()] = 1;
    }
    for (std::size_t i = 0; i <= root; ++i) {
        const Node& n = tape->node(i);
        for (const Tensor& in : n.inputs) {
            if (in.tape() == tape && relevant[in.node()]) {
                relevant[i] = 1;
                break;
            }
        }
    }

    std::vector<std::optional<Tensor>> adj(root + 1);
    adj[root] = Tensor::full(loss.shape(), 1.0);

    for (std::size_t i = root + 1; i-- > 0;) {
        if (!adj[i] || !relevant[i]) {
            continue;
        }
        // Copy: recording below may append to the tape.
        const Node n = tape->node(i);
        if (n.kind == OpKind::Leaf) {
            continue;
        }
        std::vector<bool> need(n.inputs.size());
        bool any = false;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            need[k] = n.inputs[k].tape() == tape && relevant[n.inputs[k].node()];
            any = any || need[k];
        }
        if (!any) {
            continue;
        }
        std::vector<Tensor> ins;
        Tensor out;
        Tensor g = *adj[i];
        if (create_graph) {
            ins = n.inputs;
            // The node's own handle keeps rules that reuse the output
            // (tanh, exp, log_softmax) differentiable.
            out = tape->handle(i);
        } else {
            ins.reserve(n.inputs.size());
            for (const Tensor& t : n.inputs) {
                ins.push_back(t.detach());
            }
            out = n.value;
            g = g.detach();
        }
        const auto grads = backward(n, ins, out, g, need);
        for (std::size_t k = 0; k < grads.size(); ++k) {
            if (!need[k] || !grads[k]) {
                continue;
            }
            const std::size_t j = n.inputs[k].node();
            adj[j] = adj[j] ? add(*adj[j], *grads[k]) : *grads[k];
        }
    }

    std::vector<Tensor> result;
    result.reserve(wrt.size());
    for (const Tensor& w : wrt) {
        if (adj[w.node()]) {
            result.push_back(create_graph ? *adj[w.node()] : adj[w.node()]->detach());
        } else {
            result.push_back(Tensor::zeros(w.shape()));
        }
    }
    return result;
}

ParameterVector apply_update(const ParameterVector& params, const ParameterVector& grads, double lr)
{
    if (params.size() != grads.size()) {
        throw ContractError("apply_update: " + std::to_string(params.size()) + " params vs " + std::to_string(grads.size()) + " grads");
    }
    ParameterVector out;
    out.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape()) {
            throw ContractError("apply_update: shape mismatch at tensor " + std::to_string(i) + ": " + shape_str(params[i].shape()) + " vs " + shape_str(grads[i].shape()));
        }
        out.push_back(lr == 0.0 && !grads[i].on_tape() ? params[i] : add(params[i], scale(grads[i], -lr)));
    }
    return out;
}

ParameterVector detach_all(const ParameterVector& params)
{
    ParameterVector out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.push_back(p.detach());
    }
    return out;
}

ParameterVector as_leaves(Tape& tape, const ParameterVector& params)
{
    ParameterVector out;
    out.reserve(params.size());
    for (const auto& p : params) {
        out.push_back(tape.leaf(p));
    }
    return out;
}

} // namespace memloom::ad
