#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "fgd/tensor.hpp"

namespace fgd {

/// A named trainable tensor with its gradient slot.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad = Tensor(value.shape()); }
};

class AutodiffError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Handle to a node of a Graph.
struct Var {
    static constexpr std::size_t kInvalid = std::numeric_limits<std::size_t>::max();
    std::size_t id = kInvalid;
    bool valid() const noexcept { return id != kInvalid; }
};

/// Define-by-run reverse-mode tape.
///
/// Every op evaluates eagerly and records a node; nodes are appended in
/// topological order, so backward() is a single reverse sweep. Broadcasting
/// is limited to add_row/mul_col over the leading (batch) dimension.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) = default;
    Graph& operator=(Graph&&) = default;

    Var constant(Tensor value);
    Var parameter(Parameter& p);

    const Tensor& value(Var v) const;
    /// Gradient of the last backward() target w.r.t. v; zeros if v does not
    /// influence it.
    Tensor grad(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }

    // Linear algebra and elementwise ops.
    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);  // b must be a scalar
    Var scale(Var a, double s);
    Var add_row(Var a, Var row);  // a [r,c] + row [c] on every row
    Var mul_col(Var a, Var col);  // a [r,c] * col [r,1] per row
    Var relu(Var a);
    Var sigmoid(Var a);
    Var softmax_rows(Var a);  // along the last axis

    // Reductions.
    Var sum(Var a);
    Var mean(Var a);
    Var l2norm(Var a);
    /// Mean over consecutive blocks of `block` rows: [g*block, c] -> [g, c].
    Var mean_pool(Var a, std::size_t block);

    // Structure.
    Var concat(std::span<const Var> parts);       // flattened 1-D concatenation
    Var concat_cols(std::span<const Var> parts);  // 2-D, equal row counts
    Var slice_rows(Var a, std::size_t begin, std::size_t end);
    Var slice_cols(Var a, std::size_t begin, std::size_t end);
    Var reshape(Var a, Shape shape);
    /// Copies the value but blocks gradient flow into `a`.
    Var detach(Var a);

    /// Multi-head scaled-dot-product self-attention computed independently
    /// per sample. q, k, v are [samples*steps, d] with d divisible by heads.
    Var attention(Var q, Var k, Var v, std::size_t steps, std::size_t heads);

    // Losses (mean over the batch).
    Var bce(Var prob, const Tensor& targets);
    Var bce_with_logits(Var logits, const Tensor& targets);

    /// Reverse sweep from a scalar node. Leaf gradient slots are reset first.
    void backward(Var loss);
    /// Adds every parameter leaf's gradient into Parameter::grad.
    void accumulate_gradients() const;

private:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        std::string_view op;
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        Parameter* param = nullptr;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Var push(std::string_view op, Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);
    const Node& node(Var v, std::string_view op) const;
    bool needs(std::size_t id) const { return nodes_[id].requires_grad; }
    Tensor& grad_slot(std::size_t id);

    std::vector<Node> nodes_;
    bool has_backward_ = false;
};

/// Max over all parameter entries of |analytic - central| / (|analytic| + |central| + 1e-12).
///
/// `loss_fn` must rebuild the computation from scratch and return a scalar.
double gradcheck(const std::function<Var(Graph&)>& loss_fn, std::span<Parameter* const> params,
                 double eps);

}  // namespace fgd
