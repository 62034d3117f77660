#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A computation is a DAG of Nodes. Leaves are either constants (no gradient)
// or parameters (requires_grad). Every operation returns a new Node holding
// its value and, when any input requires a gradient, a backward rule that
// accumulates into the inputs' grad tensors. Calling backward() on a scalar
// node walks the graph in reverse topological order.
//
// Every operation checks its output for NaN/Inf and throws NumericError naming
// the operation, so divergence is caught where it starts.

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "dfmad/tensor.hpp"

namespace dfmad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad; // empty until backward reaches this node
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_rule;
    std::string_view op = "leaf";

    bool is_leaf() const noexcept { return parents.empty(); }
    bool has_grad() const noexcept { return grad.numel() != 0; }
    void zero_grad() { grad = Tensor(); }
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Disables graph recording on the current thread while alive. Operations still
// compute values but keep no parents or backward rules.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

enum class ElementwiseOp { Add, Subtract, Multiply, Divide, Sigmoid, Gelu, Log, Exp, Negate };

// Binary ops accept equal shapes or a right/left operand whose shape is a
// trailing suffix of the other's (NumPy trailing-axis broadcasting); a
// single-element operand broadcasts everywhere.
Var elementwise(ElementwiseOp op, const Var& a, const Var& b = nullptr);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var pow(const Var& a, double exponent);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
Var clamp(const Var& a, double lo, double hi);

// [m x k] . [k x n]
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
// x [t x k], weight [n x k], optional bias [n]  ->  x . weight^T + bias
Var linear(const Var& x, const Var& weight, const Var& bias = nullptr);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps);
Var softmax(const Var& x, std::size_t axis);

Var sum(const Var& x);
Var mean(const Var& x);
Var reshape(const Var& x, Shape shape);

// Column block [start, start + count) of a matrix.
Var slice_cols(const Var& x, std::size_t start, std::size_t count);
Var concat_cols(std::span<const Var> parts);
// Rows of `top` followed by rows of `bottom`.
Var concat_rows(const Var& top, const Var& bottom);
Var row(const Var& x, std::size_t index);

// Accumulates d(loss)/d(node) into every reachable node that requires a
// gradient. Leaf gradients accumulate across calls; intermediate gradients
// are recomputed on each call.
void backward(const Var& loss);

// Clears grad on every parameter.
void zero_grad(std::span<const Var> params);

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_parameter = 0;
    std::size_t worst_element = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

// Compares backward() gradients of `loss_fn` against central differences
//   (f(p + h) - f(p - h)) / 2h
// for every element of every parameter. The relative error per element is
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
// `loss_fn` must be deterministic and return a scalar node.
GradCheckResult finite_difference_check(const std::function<Var()>& loss_fn, std::span<const Var> params,
                                        double h = 1e-5);

} // namespace dfmad
