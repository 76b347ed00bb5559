#pragma once

// Reverse-mode automatic differentiation over small dense tensors.
//
// Every operation is recorded on a Tape when at least one of its inputs lives
// on that tape. Backward rules are themselves written with the recorded ops, so
// grad(..., create_graph = true) yields gradients that can be differentiated
// again (needed for the gradient-through-a-gradient-step objectives).
//
// Tensors are immutable values. A Tensor holding a tape handle must not outlive
// its Tape.

#include <cstddef>
#include <deque>
#include <initializer_list>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace memloom::ad {

using Shape = std::vector<std::size_t>;

class Tape;

class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    static Tensor vector(std::vector<double> data);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_->size(); }
    std::span<const double> data() const noexcept { return *data_; }
    double operator[](std::size_t i) const { return (*data_)[i]; }
    // Value of a single-element tensor.
    double item() const;

    bool on_tape() const noexcept { return tape_ != nullptr; }
    Tape* tape() const noexcept { return tape_; }
    std::size_t node() const noexcept { return node_; }

    // Same values, no tape handle.
    Tensor detach() const;

private:
    friend class Tape;
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    Tape* tape_ = nullptr;
    std::size_t node_ = 0;
};

enum class OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Tanh,
    Relu,
    Exp,
    LogSoftmax,
    Nll,
    Sum,
    SumTo,
    BroadcastTo,
    SquaredNorm,
};

std::string_view op_name(OpKind kind) noexcept;

struct Node {
    OpKind kind = OpKind::Leaf;
    std::vector<Tensor> inputs;
    Tensor value; // detached forward result
    double scalar = 0.0;
    bool trans_a = false;
    bool trans_b = false;
    Shape target;
    std::shared_ptr<const std::vector<std::size_t>> labels;
};

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Registers a differentiable leaf holding a copy of value's data.
    Tensor leaf(const Tensor& value);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Node& node(std::size_t id) const { return nodes_.at(id); }

    // Tensor referring to an existing node.
    Tensor handle(std::size_t id);

    // Internal: append a computed node and return its handle.
    Tensor record(Node node);

private:
    std::deque<Node> nodes_;
};

// Elementary ops. Add and mul broadcast a scalar, a row vector [m] / [1, m], or
// a column [n, 1] against an [n, m] operand.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
// Row-wise log-softmax of an [n, C] tensor.
Tensor log_softmax(const Tensor& logits);
// Mean negative log-likelihood -(1/n) sum_i logp[i, labels[i]] as a scalar.
Tensor nll(const Tensor& log_probs, std::span<const std::size_t> labels);
Tensor sum(const Tensor& a);
// Reduces a broadcast result back to a compatible shape; adjoint of broadcast_to.
Tensor sum_to(const Tensor& a, const Shape& target);
Tensor broadcast_to(const Tensor& a, const Shape& target);
Tensor squared_norm(const Tensor& a);

// Convenience compositions.
Tensor sub(const Tensor& a, const Tensor& b);

// d loss / d w for each w in wrt (leaves or intermediate nodes of the loss's
// tape). With create_graph the returned gradients are
// recorded on the tape and can be differentiated again; otherwise they are
// detached constants.
std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt, bool create_graph = false);

using ParameterVector = std::vector<Tensor>;

// params - lr * grads, recorded when any operand is on a tape.
ParameterVector apply_update(const ParameterVector& params, const ParameterVector& grads, double lr);

ParameterVector detach_all(const ParameterVector& params);
ParameterVector as_leaves(Tape& tape, const ParameterVector& params);

} // namespace memloom::ad
