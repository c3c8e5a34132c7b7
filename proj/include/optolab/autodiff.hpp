#pragma once

// Reverse-mode automatic differentiation over dense double tensors.
//
// A Graph is built symbolically (each builder call appends one node whose
// parents already exist), then evaluated against leaf bindings and swept in
// reverse for gradients. Any node may carry a Substitution: its value is
// replaced before any consumer reads it, and its adjoint is either dropped
// (CONSTANT) or forwarded to a declared source node (FLOW). Substitutions
// may be restricted to a subset of elements with a mask; unmasked elements
// keep their computed value and ordinary gradient.

#include <compare>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "optolab/tensor.hpp"

namespace optolab {

struct NodeId {
    std::uint32_t index = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return index != std::numeric_limits<std::uint32_t>::max(); }
    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

enum class GradPolicy { Constant, Flow };

struct Substitution {
    std::variant<Tensor, NodeId> source;
    GradPolicy policy = GradPolicy::Constant;
    /// Empty: every element is replaced. Otherwise one byte per element; 1 = replace.
    std::vector<std::uint8_t> mask;

    static Substitution constant(Tensor value, std::vector<std::uint8_t> mask = {}) {
        return {std::move(value), GradPolicy::Constant, std::move(mask)};
    }
    /// Value of `src`, with no gradient reaching either `src` or the original parents.
    static Substitution frozen(NodeId src, std::vector<std::uint8_t> mask = {}) {
        return {src, GradPolicy::Constant, std::move(mask)};
    }
    /// Value of `src`; the adjoint of the replaced elements is routed to `src`.
    static Substitution flow(NodeId src, std::vector<std::uint8_t> mask = {}) {
        return {src, GradPolicy::Flow, std::move(mask)};
    }
};

class ShapeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class GraphError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Op : std::uint8_t {
    Leaf,
    Constant,
    MatMul,
    Add,
    Mul,
    Scale,
    Transpose,
    Reshape,
    MaskedSoftmax,
    LayerNorm,
    Rotary,
    GatherRows,
    GatherElements,
    Concat,
    Slice,
    CrossEntropy,
    Detach,
    Sum,
};

const char* op_name(Op op);

using Bindings = std::vector<std::pair<NodeId, Tensor>>;

class Graph {
public:
    // ---- construction ----
    NodeId leaf(std::string name, bool requires_grad = true);
    NodeId constant(Tensor value, std::string label = {});

    /// a: [batch..., m, k]. b: [k, n] shared across the batch, or [batch..., k, n]
    /// with the same leading dims. transpose_b reads b as [.., n, k].
    NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
    NodeId add(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double factor);
    /// Swaps the last two axes.
    NodeId transpose(NodeId a);
    NodeId reshape(NodeId a, Shape shape);
    /// Softmax over the last axis of a [..., T, T] tensor; `causal` masks column > row.
    NodeId masked_softmax(NodeId logits, bool causal = true);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps);
    /// Rotates coordinate pairs (2i, 2i+1) of the last axis by angle pos * base^(-2i/d),
    /// where pos is the index along the second-to-last axis.
    NodeId rotary(NodeId x, double base);
    /// Views `table` as rows of its last-axis width and picks `rows`; result reshaped to `shape`.
    NodeId gather_rows(NodeId table, std::vector<std::size_t> rows, Shape shape);
    NodeId embedding(NodeId table, std::vector<std::size_t> ids, Shape shape) {
        return gather_rows(table, std::move(ids), std::move(shape));
    }
    /// out[i] = x.flat[source[i]], or `fill` where source[i] < 0.
    NodeId gather_elements(NodeId x, Shape shape, std::vector<std::int64_t> source, double fill);
    NodeId concat(const std::vector<NodeId>& parts, std::size_t axis);
    NodeId slice(NodeId x, std::size_t axis, std::size_t start, std::size_t length);
    /// Mean cross-entropy of the selected logit rows (last axis = classes) against targets.
    NodeId cross_entropy(NodeId logits, std::vector<std::size_t> rows,
                         std::vector<std::size_t> targets);
    NodeId detach(NodeId x);
    NodeId sum(NodeId x);

    /// Installs a substitution. A node-valued source must precede `node` (or be `node`).
    void substitute(NodeId node, Substitution sub);
    void set_label(NodeId node, std::string label);

    // ---- evaluation ----
    void bind(NodeId leaf, Tensor value);
    void evaluate();
    void evaluate(const Bindings& bindings);
    const Tensor& value(NodeId node) const;

    /// Reverse sweep from a scalar node. Gradients accumulate in a fixed order.
    void backward(NodeId loss);
    /// Adjoint of `node` from the last backward; zeros if unreachable.
    Tensor grad(NodeId node) const;

    std::size_t size() const { return nodes_.size(); }
    Op op(NodeId node) const { return at(node).op; }
    std::string describe(NodeId node) const;
    const std::vector<NodeId>& leaves() const { return leaves_; }
    bool has_substitution(NodeId node) const { return at(node).sub.has_value(); }

private:
    struct Node {
        Op op = Op::Leaf;
        std::vector<NodeId> parents;
        std::string label;
        bool leaf_requires_grad = false;
        // attributes
        double scalar = 0.0;
        std::size_t axis = 0;
        std::size_t start = 0;
        std::size_t length = 0;
        bool flag = false;
        Shape shape;
        std::vector<std::size_t> indices;
        std::vector<std::size_t> targets;
        std::vector<std::int64_t> source_map;
        // state
        std::optional<Substitution> sub;
        std::optional<Tensor> bound;
        Tensor value;
        std::vector<Tensor> aux;
        bool needs_grad = false;
    };

    NodeId push(Node node);
    Node& at(NodeId id);
    const Node& at(NodeId id) const;
    void check_parent(NodeId id) const;
    [[noreturn]] void shape_fail(std::size_t index, const std::string& what) const;

    void forward_node(std::size_t index);
    void apply_substitution(std::size_t index);
    void backward_node(std::size_t index, const Tensor& g, std::vector<Tensor>& grads);

    std::vector<Node> nodes_;
    std::vector<NodeId> leaves_;
    std::vector<Tensor> grads_;
    bool evaluated_ = false;
};

struct GradientCheckEntry {
    NodeId leaf;
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradientCheckReport {
    std::vector<GradientCheckEntry> entries;
    double worst() const;
};

/// Compares reverse-mode adjoints of every requires-grad leaf against central
/// differences with the given step. Relative error per element is
/// |a - n| / max(|a|, |n|, floor). With `extrapolate`, central differences at
/// step and step/2 are combined to fourth order. Throws GraphError on non-finite perturbed loss.
GradientCheckReport check_gradients(Graph& graph, const Bindings& bindings, NodeId loss,
                                    double step, double floor = 1e-4, bool extrapolate = false);

}  // namespace optolab
