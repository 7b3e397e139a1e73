#pragma once

// Dense float64 tensors and a single-use reverse-mode tape.
//
// Values live in `Tensor`. Differentiable computations are recorded on a
// `Tape` through `Var` handles; `Tape::backward` replays the record in reverse
// and leaves gradients on every requires-grad node (and on watched external
// tensors such as network parameters).

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lpa3 {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TapeError : std::logic_error {
    using std::logic_error::logic_error;
};

class Tensor {
public:
    Tensor();
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double item() const;

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<const double> grad() const { return grad_; }
    std::span<double> grad() { return grad_; }
    void zero_grad();
    void clear_grad() { grad_.clear(); }
    void accumulate_grad(std::span<const double> g);

    // Same data under a new shape with an equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const;

private:
    Shape shape_;
    std::vector<double> data_;
    bool requires_grad_ = false;
    std::vector<double> grad_;
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    bool requires_grad() const;
    Tape& tape() const;
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    // Receives the id and upstream gradient of the node being replayed.
    using BackwardFn = std::function<void(Tape&, std::size_t, std::span<const double>)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    // A leaf owned by the tape; its gradient is read back with grad().
    Var leaf(Tensor value);
    // A leaf aliasing an external tensor. If the tensor requires grad, the
    // backward pass accumulates into its grad buffer. The tensor must outlive
    // the tape's backward pass.
    Var watch(Tensor& external);

    // Used by the primitive ops.
    Var record(Tensor value, bool requires_grad, BackwardFn backward);

    void backward(Var scalar);
    bool consumed() const { return consumed_; }

    // Gradient of a node after backward(); zeros if nothing flowed into it.
    Tensor grad(Var v) const;

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    // Gradient accumulator of a node; allocated on first use.
    std::vector<double>& grad_buffer(std::size_t id);

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        BackwardFn backward;
        Tensor* external = nullptr;
        std::vector<double> grad;
    };

    void check_live() const;

    std::deque<Node> nodes_;
    bool consumed_ = false;
};

// Primitive differentiable operations. Binary elementwise ops accept operands
// of equal shape or a single-element operand (scalar broadcast only).
// Reductions named *_last operate along the last axis; a rank-1 input
// reduces to shape {1}.
namespace ops {

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_scalar(Var a, double offset);
Var neg(Var a);

// (m,k) x (k,n) -> (m,n)
Var matmul(Var a, Var b);
Var transpose(Var a);
// x (B,in), weight (out,in), bias (out) -> (B,out)
Var linear(Var x, Var weight, Var bias);
// x (B,C,H,W), weight (O,C,K,K), bias (O); stride 1, zero padding.
Var conv2d(Var x, Var weight, Var bias, std::size_t padding);

// Derivative at exactly 0 is 0.
Var relu(Var a);
Var log(Var a);
Var exp(Var a);
// Gradient passes where lo <= a <= hi.
Var clamp(Var a, double lo, double hi);

Var sum(Var a);
Var mean(Var a);
Var sum_last(Var a);
Var l2_norm(Var a);  // gradient at a zero row is zero
Var max_last(Var a);  // gradient routes to the first maximal entry
Var softmax(Var a);
Var log_softmax(Var a);

Var reshape(Var a, Shape shape);
// a (B,C), one index per row -> (B)
Var pick(Var a, std::span<const std::size_t> index);
// Concatenate rank-2 tensors with equal row count along columns.
Var concat_columns(std::span<const Var> parts);

// Unit L2 normalization across channels. Rank 2 (B,D): each row is one
// position with D channels. Rank 4 (B,C,H,W): each (b,h,w) position is
// normalized across C. All-zero positions map to zero.
Var channel_normalize(Var a);
// Unit L2 normalization of each sample's whole block (rank >= 2).
Var sample_normalize(Var a);

// Per-channel affine normalization with constant statistics:
// y = gamma * (x - mean) / sqrt(var + eps) + beta. Channel axis is 1.
Var normalize_affine(Var x, std::span<const double> mean, std::span<const double> var, Var gamma,
                     Var beta, double eps);

}  // namespace ops

}  // namespace lpa3
