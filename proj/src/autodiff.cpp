#include "optolab/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "optolab/kernels.hpp"

namespace optolab {

const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::MatMul: return "matmul";
        case Op::Add: return "add";
        case Op::Mul: return "mul";
        case Op::Scale: return "scale";
        case Op::Transpose: return "transpose";
        case Op::Reshape: return "reshape";
        case Op::MaskedSoftmax: return "masked_softmax";
        case Op::LayerNorm: return "layer_norm";
        case Op::Rotary: return "rotary";
        case Op::GatherRows: return "gather_rows";
        case Op::GatherElements: return "gather_elements";
        case Op::Concat: return "concat";
        case Op::Slice: return "slice";
        case Op::CrossEntropy: return "cross_entropy";
        case Op::Detach: return "detach";
        case Op::Sum: return "sum";
    }
    return "?";
}

namespace {

void accumulate(Tensor& dst, const Tensor& g) {
    if (dst.size() == 0) {
        dst = g;
        return;
    }
    auto d = dst.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void accumulate(Tensor& dst, Tensor&& g) {
    if (dst.size() == 0) {
        dst = std::move(g);
        return;
    }
    auto d = dst.data();
    auto s = g.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// Product of all dims except the last two.
std::size_t batch_count(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 0; i + 2 < s.size(); ++i) n *= s[i];
    return n;
}

// (outer, axis_len, inner) split of a shape around `axis`.
struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace

// ---------------------------------------------------------------- construction

NodeId Graph::push(Node node) {
    if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max() - 1) {
        throw GraphError("graph too large");
    }
    for (NodeId p : node.parents) check_parent(p);
    nodes_.push_back(std::move(node));
    evaluated_ = false;
    return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

Graph::Node& Graph::at(NodeId id) {
    if (!id.valid() || id.index >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[id.index];
}

const Graph::Node& Graph::at(NodeId id) const {
    if (!id.valid() || id.index >= nodes_.size()) throw GraphError("invalid node id");
    return nodes_[id.index];
}

void Graph::check_parent(NodeId id) const {
    if (!id.valid() || id.index >= nodes_.size()) throw GraphError("parent node does not exist");
}

NodeId Graph::leaf(std::string name, bool requires_grad) {
    Node n;
    n.op = Op::Leaf;
    n.label = std::move(name);
    n.leaf_requires_grad = requires_grad;
    NodeId id = push(std::move(n));
    leaves_.push_back(id);
    return id;
}

NodeId Graph::constant(Tensor value, std::string label) {
    Node n;
    n.op = Op::Constant;
    n.label = std::move(label);
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b, bool transpose_b) {
    Node n;
    n.op = Op::MatMul;
    n.parents = {a, b};
    n.flag = transpose_b;
    return push(std::move(n));
}

NodeId Graph::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    return push(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Mul;
    n.parents = {a, b};
    return push(std::move(n));
}

NodeId Graph::scale(NodeId a, double factor) {
    Node n;
    n.op = Op::Scale;
    n.parents = {a};
    n.scalar = factor;
    return push(std::move(n));
}

NodeId Graph::transpose(NodeId a) {
    Node n;
    n.op = Op::Transpose;
    n.parents = {a};
    return push(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
    Node n;
    n.op = Op::Reshape;
    n.parents = {a};
    n.shape = std::move(shape);
    return push(std::move(n));
}

NodeId Graph::masked_softmax(NodeId logits, bool causal) {
    Node n;
    n.op = Op::MaskedSoftmax;
    n.parents = {logits};
    n.flag = causal;
    return push(std::move(n));
}

NodeId Graph::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    Node n;
    n.op = Op::LayerNorm;
    n.parents = {x, gain, bias};
    n.scalar = eps;
    return push(std::move(n));
}

NodeId Graph::rotary(NodeId x, double base) {
    Node n;
    n.op = Op::Rotary;
    n.parents = {x};
    n.scalar = base;
    return push(std::move(n));
}

NodeId Graph::gather_rows(NodeId table, std::vector<std::size_t> rows, Shape shape) {
    Node n;
    n.op = Op::GatherRows;
    n.parents = {table};
    n.indices = std::move(rows);
    n.shape = std::move(shape);
    return push(std::move(n));
}

NodeId Graph::gather_elements(NodeId x, Shape shape, std::vector<std::int64_t> source,
                              double fill) {
    Node n;
    n.op = Op::GatherElements;
    n.parents = {x};
    n.shape = std::move(shape);
    n.source_map = std::move(source);
    n.scalar = fill;
    return push(std::move(n));
}

NodeId Graph::concat(const std::vector<NodeId>& parts, std::size_t axis) {
    if (parts.empty()) throw GraphError("concat of zero tensors");
    Node n;
    n.op = Op::Concat;
    n.parents = parts;
    n.axis = axis;
    return push(std::move(n));
}

NodeId Graph::slice(NodeId x, std::size_t axis, std::size_t start, std::size_t length) {
    Node n;
    n.op = Op::Slice;
    n.parents = {x};
    n.axis = axis;
    n.start = start;
    n.length = length;
    return push(std::move(n));
}

NodeId Graph::cross_entropy(NodeId logits, std::vector<std::size_t> rows,
                            std::vector<std::size_t> targets) {
    if (rows.size() != targets.size() || rows.empty()) {
        throw GraphError("cross_entropy: need one target per selected row");
    }
    Node n;
    n.op = Op::CrossEntropy;
    n.parents = {logits};
    n.indices = std::move(rows);
    n.targets = std::move(targets);
    return push(std::move(n));
}

NodeId Graph::detach(NodeId x) {
    Node n;
    n.op = Op::Detach;
    n.parents = {x};
    return push(std::move(n));
}

NodeId Graph::sum(NodeId x) {
    Node n;
    n.op = Op::Sum;
    n.parents = {x};
    return push(std::move(n));
}

void Graph::substitute(NodeId node, Substitution sub) {
    Node& n = at(node);
    if (const NodeId* src = std::get_if<NodeId>(&sub.source)) {
        check_parent(*src);
        if (src->index > node.index) {
            throw GraphError("substitution source " + describe(*src) + " does not precede " +
                             describe(node));
        }
    } else if (sub.policy == GradPolicy::Flow) {
        throw GraphError("FLOW substitution needs a source node, got a literal tensor for " +
                         describe(node));
    }
    n.sub = std::move(sub);
    evaluated_ = false;
}

void Graph::set_label(NodeId node, std::string label) { at(node).label = std::move(label); }

std::string Graph::describe(NodeId node) const {
    const Node& n = at(node);
    std::ostringstream os;
    os << '#' << node.index << ' ' << op_name(n.op);
    if (!n.label.empty()) os << " '" << n.label << '\'';
    return os.str();
}

void Graph::shape_fail(std::size_t index, const std::string& what) const {
    throw ShapeError("shape mismatch at node " + describe(NodeId{static_cast<std::uint32_t>(index)}) +
                     ": " + what);
}

// ---------------------------------------------------------------- evaluation

void Graph::bind(NodeId leaf_id, Tensor value) {
    Node& n = at(leaf_id);
    if (n.op != Op::Leaf) throw GraphError("bind: " + describe(leaf_id) + " is not a leaf");
    n.bound = std::move(value);
    evaluated_ = false;
}

void Graph::evaluate(const Bindings& bindings) {
    for (const auto& [id, t] : bindings) bind(id, t);
    evaluate();
}

void Graph::evaluate() {
    grads_.clear();
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        forward_node(i);
        switch (n.op) {
            case Op::Leaf: n.needs_grad = n.leaf_requires_grad; break;
            case Op::Constant:
            case Op::Detach: n.needs_grad = false; break;
            default: {
                bool any = false;
                for (NodeId p : n.parents) any = any || nodes_[p.index].needs_grad;
                n.needs_grad = any;
            }
        }
        if (n.sub) {
            apply_substitution(i);
            const NodeId* src = std::get_if<NodeId>(&n.sub->source);
            const bool self = src && src->index == i;
            if (!self) {
                const bool via_source =
                    n.sub->policy == GradPolicy::Flow && src && nodes_[src->index].needs_grad;
                const bool via_parents = !n.sub->mask.empty() && n.needs_grad;
                n.needs_grad = via_source || via_parents;
            }
        }
    }
    evaluated_ = true;
}

const Tensor& Graph::value(NodeId node) const {
    if (!evaluated_) throw GraphError("value requested before evaluate()");
    return at(node).value;
}

void Graph::apply_substitution(std::size_t index) {
    Node& n = nodes_[index];
    const Substitution& s = *n.sub;
    const Tensor* src = nullptr;
    if (const NodeId* id = std::get_if<NodeId>(&s.source)) {
        if (id->index == index) return;
        src = &nodes_[id->index].value;
    } else {
        src = &std::get<Tensor>(s.source);
    }
    if (src->shape() != n.value.shape()) {
        shape_fail(index, "substituted value " + shape_str(src->shape()) + " vs computed " +
                              shape_str(n.value.shape()));
    }
    if (s.mask.empty()) {
        n.value = *src;
        return;
    }
    if (s.mask.size() != n.value.size()) {
        shape_fail(index, "substitution mask has " + std::to_string(s.mask.size()) +
                              " entries, value has " + std::to_string(n.value.size()));
    }
    for (std::size_t j = 0; j < n.value.size(); ++j) {
        if (s.mask[j]) n.value[j] = (*src)[j];
    }
}

void Graph::forward_node(std::size_t i) {
    Node& n = nodes_[i];
    auto pv = [&](std::size_t k) -> const Tensor& { return nodes_[n.parents[k].index].value; };

    switch (n.op) {
        case Op::Leaf: {
            if (!n.bound) throw GraphError("unbound leaf " + describe(NodeId{static_cast<std::uint32_t>(i)}));
            n.value = *n.bound;
            break;
        }
        case Op::Constant: break;
        case Op::MatMul: {
            const Tensor& a = pv(0);
            const Tensor& b = pv(1);
            if (a.rank() < 2 || b.rank() < 2) shape_fail(i, "matmul operands need rank >= 2");
            const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
            const std::size_t kb = n.flag ? b.dim(b.rank() - 1) : b.dim(b.rank() - 2);
            const std::size_t nn = n.flag ? b.dim(b.rank() - 2) : b.dim(b.rank() - 1);
            if (kb != k) {
                shape_fail(i, "inner dims " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                                  (n.flag ? "^T" : ""));
            }
            Shape out = a.shape();
            out.back() = nn;
            n.value = Tensor(out);
            const std::size_t nb = batch_count(a.shape());
            if (b.rank() == 2) {
                kernels::gemm(false, n.flag, nb * m, nn, k, a.data().data(), b.data().data(),
                              n.value.data().data(), false);
            } else {
                if (b.rank() != a.rank() ||
                    !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
                    shape_fail(i, "batched matmul leading dims " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
                }
                for (std::size_t bi = 0; bi < nb; ++bi) {
                    kernels::gemm(false, n.flag, m, nn, k, a.data().data() + bi * m * k,
                                  b.data().data() + bi * k * nn, n.value.data().data() + bi * m * nn,
                                  false);
                }
            }
            break;
        }
        case Op::Add:
        case Op::Mul: {
            const Tensor& a = pv(0);
            const Tensor& b = pv(1);
            if (a.shape() != b.shape()) {
                shape_fail(i, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
            }
            n.value = a;
            auto d = n.value.data();
            auto s = b.data();
            if (n.op == Op::Add) {
                for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
            } else {
                for (std::size_t j = 0; j < d.size(); ++j) d[j] *= s[j];
            }
            break;
        }
        case Op::Scale: {
            n.value = pv(0);
            for (double& v : n.value.data()) v *= n.scalar;
            break;
        }
        case Op::Transpose: {
            const Tensor& a = pv(0);
            if (a.rank() < 2) shape_fail(i, "transpose needs rank >= 2");
            const std::size_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
            Shape out = a.shape();
            std::swap(out[out.size() - 1], out[out.size() - 2]);
            n.value = Tensor(out);
            const std::size_t nb = batch_count(a.shape());
            for (std::size_t b = 0; b < nb; ++b) {
                const double* src = a.data().data() + b * r * c;
                double* dst = n.value.data().data() + b * r * c;
                for (std::size_t x = 0; x < r; ++x) {
                    for (std::size_t y = 0; y < c; ++y) dst[y * r + x] = src[x * c + y];
                }
            }
            break;
        }
        case Op::Reshape: {
            const Tensor& a = pv(0);
            if (shape_numel(n.shape) != a.size()) {
                shape_fail(i, "reshape " + shape_str(a.shape()) + " -> " + shape_str(n.shape));
            }
            n.value = a.reshaped(n.shape);
            break;
        }
        case Op::MaskedSoftmax: {
            const Tensor& a = pv(0);
            if (a.rank() < 1) shape_fail(i, "softmax needs rank >= 1");
            const std::size_t cols = a.dim(a.rank() - 1);
            if (n.flag && (a.rank() < 2 || a.dim(a.rank() - 2) != cols)) {
                shape_fail(i, "causal softmax needs square trailing dims, got " + shape_str(a.shape()));
            }
            n.value = Tensor(a.shape());
            kernels::softmax_rows(a.size() / cols, cols, n.flag, a.data().data(),
                                  n.value.data().data());
            n.aux.assign(1, n.value);
            break;
        }
        case Op::LayerNorm: {
            const Tensor& x = pv(0);
            const Tensor& g = pv(1);
            const Tensor& b = pv(2);
            if (x.rank() < 1) shape_fail(i, "layer_norm needs rank >= 1");
            const std::size_t d = x.dim(x.rank() - 1);
            if (g.size() != d || b.size() != d) {
                shape_fail(i, "gain/bias " + shape_str(g.shape()) + "/" + shape_str(b.shape()) +
                                  " for width " + std::to_string(d));
            }
            const std::size_t rows = x.size() / d;
            n.value = Tensor(x.shape());
            n.aux.assign(2, Tensor());
            n.aux[0] = Tensor(x.shape());
            n.aux[1] = Tensor({rows});
            kernels::layernorm_rows(rows, d, n.scalar, x.data().data(), g.data().data(),
                                    b.data().data(), n.value.data().data(), n.aux[0].data().data(),
                                    n.aux[1].data().data());
            break;
        }
        case Op::Rotary: {
            const Tensor& x = pv(0);
            if (x.rank() < 2 || x.dim(x.rank() - 1) % 2 != 0) {
                shape_fail(i, "rotary needs [..., T, even d], got " + shape_str(x.shape()));
            }
            const std::size_t t = x.dim(x.rank() - 2), d = x.dim(x.rank() - 1);
            n.value = Tensor(x.shape());
            Tensor cs({t, d / 2, 2});
            for (std::size_t p = 0; p < t; ++p) {
                for (std::size_t q = 0; q < d / 2; ++q) {
                    const double theta =
                        std::pow(n.scalar, -2.0 * static_cast<double>(q) / static_cast<double>(d));
                    const double ang = static_cast<double>(p) * theta;
                    cs[(p * (d / 2) + q) * 2] = std::cos(ang);
                    cs[(p * (d / 2) + q) * 2 + 1] = std::sin(ang);
                }
            }
            const std::size_t rows = x.size() / d;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t p = r % t;
                const double* xr = x.data().data() + r * d;
                double* yr = n.value.data().data() + r * d;
                for (std::size_t q = 0; q < d / 2; ++q) {
                    const double c = cs[(p * (d / 2) + q) * 2], s = cs[(p * (d / 2) + q) * 2 + 1];
                    yr[2 * q] = xr[2 * q] * c - xr[2 * q + 1] * s;
                    yr[2 * q + 1] = xr[2 * q] * s + xr[2 * q + 1] * c;
                }
            }
            n.aux.assign(1, std::move(cs));
            break;
        }
        case Op::GatherRows: {
            const Tensor& tab = pv(0);
            const std::size_t w = tab.rank() >= 2 ? tab.dim(tab.rank() - 1) : 1;
            const std::size_t nrows = w ? tab.size() / w : 0;
            if (shape_numel(n.shape) != n.indices.size() * w) {
                shape_fail(i, "gather of " + std::to_string(n.indices.size()) + " rows of width " +
                                  std::to_string(w) + " into " + shape_str(n.shape));
            }
            n.value = Tensor(n.shape);
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                if (n.indices[r] >= nrows) {
                    shape_fail(i, "row index " + std::to_string(n.indices[r]) + " >= " +
                                      std::to_string(nrows));
                }
                std::copy_n(tab.data().data() + n.indices[r] * w, w, n.value.data().data() + r * w);
            }
            break;
        }
        case Op::GatherElements: {
            const Tensor& x = pv(0);
            if (n.source_map.size() != shape_numel(n.shape)) {
                shape_fail(i, "gather_elements map size vs " + shape_str(n.shape));
            }
            n.value = Tensor(n.shape);
            for (std::size_t j = 0; j < n.source_map.size(); ++j) {
                const std::int64_t s = n.source_map[j];
                if (s >= static_cast<std::int64_t>(x.size())) shape_fail(i, "gather_elements index out of range");
                n.value[j] = s < 0 ? n.scalar : x[static_cast<std::size_t>(s)];
            }
            break;
        }
        case Op::Concat: {
            const Tensor& first = pv(0);
            if (n.axis >= first.rank()) shape_fail(i, "concat axis out of range");
            Shape out = first.shape();
            out[n.axis] = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const Tensor& t = pv(k);
                if (t.rank() != first.rank()) shape_fail(i, "concat rank mismatch");
                for (std::size_t ax = 0; ax < t.rank(); ++ax) {
                    if (ax != n.axis && t.dim(ax) != first.dim(ax)) {
                        shape_fail(i, "concat " + shape_str(first.shape()) + " with " +
                                          shape_str(t.shape()));
                    }
                }
                out[n.axis] += t.dim(n.axis);
            }
            n.value = Tensor(out);
            const AxisSplit os = split_at(out, n.axis);
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const Tensor& t = pv(k);
                const AxisSplit ts = split_at(t.shape(), n.axis);
                for (std::size_t o = 0; o < ts.outer; ++o) {
                    std::copy_n(t.data().data() + o * ts.len * ts.inner, ts.len * ts.inner,
                                n.value.data().data() + (o * os.len + offset) * os.inner);
                }
                offset += ts.len;
            }
            break;
        }
        case Op::Slice: {
            const Tensor& x = pv(0);
            if (n.axis >= x.rank() || n.start + n.length > x.dim(n.axis)) {
                shape_fail(i, "slice [" + std::to_string(n.start) + ", +" + std::to_string(n.length) +
                                  ") of " + shape_str(x.shape()));
            }
            Shape out = x.shape();
            out[n.axis] = n.length;
            n.value = Tensor(out);
            const AxisSplit xs = split_at(x.shape(), n.axis);
            for (std::size_t o = 0; o < xs.outer; ++o) {
                std::copy_n(x.data().data() + (o * xs.len + n.start) * xs.inner, n.length * xs.inner,
                            n.value.data().data() + o * n.length * xs.inner);
            }
            break;
        }
        case Op::CrossEntropy: {
            const Tensor& x = pv(0);
            if (x.rank() < 1) shape_fail(i, "cross_entropy needs rank >= 1");
            const std::size_t c = x.dim(x.rank() - 1);
            const std::size_t nrows = x.size() / c;
            Tensor probs({n.indices.size(), c});
            double total = 0.0;
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                if (n.indices[r] >= nrows) shape_fail(i, "cross_entropy row out of range");
                if (n.targets[r] >= c) {
                    throw GraphError("cross_entropy target " + std::to_string(n.targets[r]) +
                                     " outside [0, " + std::to_string(c) + ")");
                }
                const double* row = x.data().data() + n.indices[r] * c;
                double mx = row[0];
                for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
                const double lse = mx + std::log(z);
                for (std::size_t j = 0; j < c; ++j) probs[r * c + j] = std::exp(row[j] - lse);
                total += lse - row[n.targets[r]];
            }
            n.value = Tensor::scalar(total / static_cast<double>(n.indices.size()));
            n.aux.assign(1, std::move(probs));
            break;
        }
        case Op::Detach: n.value = pv(0); break;
        case Op::Sum: {
            double s = 0.0;
            for (double v : pv(0).data()) s += v;
            n.value = Tensor::scalar(s);
            break;
        }
    }
}

// ---------------------------------------------------------------- backward

void Graph::backward(NodeId loss) {
    if (!evaluated_) throw GraphError("backward before evaluate()");
    const Node& ln = at(loss);
    if (ln.value.size() != 1) {
        throw GraphError("backward from non-scalar node " + describe(loss) + " " +
                         shape_str(ln.value.shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss.index] = Tensor(ln.value.shape(), 1.0);
    for (std::size_t idx = loss.index + 1; idx-- > 0;) {
        Node& n = nodes_[idx];
        if (grads_[idx].size() == 0 || !n.needs_grad) continue;
        const Tensor& g = grads_[idx];
        if (!n.sub) {
            backward_node(idx, g, grads_);
            continue;
        }
        const Substitution& s = *n.sub;
        const NodeId* src = std::get_if<NodeId>(&s.source);
        if (src && src->index == idx) {
            backward_node(idx, g, grads_);
            continue;
        }
        if (s.policy == GradPolicy::Flow && src && nodes_[src->index].needs_grad) {
            if (s.mask.empty()) {
                accumulate(grads_[src->index], g);
            } else {
                Tensor part(g.shape());
                for (std::size_t j = 0; j < g.size(); ++j) part[j] = s.mask[j] ? g[j] : 0.0;
                accumulate(grads_[src->index], std::move(part));
            }
        }
        if (!s.mask.empty()) {
            Tensor rest(g.shape());
            for (std::size_t j = 0; j < g.size(); ++j) rest[j] = s.mask[j] ? 0.0 : g[j];
            backward_node(idx, rest, grads_);
        }
    }
}

Tensor Graph::grad(NodeId node) const {
    const Node& n = at(node);
    if (node.index < grads_.size() && grads_[node.index].size() != 0) return grads_[node.index];
    return Tensor(n.value.shape());
}

void Graph::backward_node(std::size_t i, const Tensor& g, std::vector<Tensor>& grads) {
    Node& n = nodes_[i];
    auto pnode = [&](std::size_t k) -> Node& { return nodes_[n.parents[k].index]; };
    auto pgrad = [&](std::size_t k) -> Tensor& { return grads[n.parents[k].index]; };
    auto wants = [&](std::size_t k) { return pnode(k).needs_grad; };

    switch (n.op) {
        case Op::Leaf:
        case Op::Constant:
        case Op::Detach: break;
        case Op::MatMul: {
            const Tensor& a = pnode(0).value;
            const Tensor& b = pnode(1).value;
            const std::size_t m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
            const std::size_t nn = n.value.dim(n.value.rank() - 1);
            const std::size_t nb = batch_count(a.shape());
            const bool tb = n.flag;
            if (b.rank() == 2) {
                const std::size_t rows = nb * m;
                if (wants(0)) {
                    Tensor da(a.shape());
                    // dA = dC * op(B)^T
                    kernels::gemm(false, !tb, rows, k, nn, g.data().data(), b.data().data(),
                                  da.data().data(), false);
                    accumulate(pgrad(0), std::move(da));
                }
                if (wants(1)) {
                    Tensor db(b.shape());
                    if (!tb) {
                        kernels::gemm(true, false, k, nn, rows, a.data().data(), g.data().data(),
                                      db.data().data(), false);
                    } else {
                        kernels::gemm(true, false, nn, k, rows, g.data().data(), a.data().data(),
                                      db.data().data(), false);
                    }
                    accumulate(pgrad(1), std::move(db));
                }
            } else {
                if (wants(0)) {
                    Tensor da(a.shape());
                    for (std::size_t bi = 0; bi < nb; ++bi) {
                        kernels::gemm(false, !tb, m, k, nn, g.data().data() + bi * m * nn,
                                      b.data().data() + bi * k * nn, da.data().data() + bi * m * k,
                                      false);
                    }
                    accumulate(pgrad(0), std::move(da));
                }
                if (wants(1)) {
                    Tensor db(b.shape());
                    for (std::size_t bi = 0; bi < nb; ++bi) {
                        const double* ab = a.data().data() + bi * m * k;
                        const double* gb = g.data().data() + bi * m * nn;
                        double* out = db.data().data() + bi * k * nn;
                        if (!tb) {
                            kernels::gemm(true, false, k, nn, m, ab, gb, out, false);
                        } else {
                            kernels::gemm(true, false, nn, k, m, gb, ab, out, false);
                        }
                    }
                    accumulate(pgrad(1), std::move(db));
                }
            }
            break;
        }
        case Op::Add: {
            if (wants(0)) accumulate(pgrad(0), g);
            if (wants(1)) accumulate(pgrad(1), g);
            break;
        }
        case Op::Mul: {
            const Tensor& a = pnode(0).value;
            const Tensor& b = pnode(1).value;
            if (wants(0)) {
                Tensor da(g.shape());
                for (std::size_t j = 0; j < g.size(); ++j) da[j] = g[j] * b[j];
                accumulate(pgrad(0), std::move(da));
            }
            if (wants(1)) {
                Tensor db(g.shape());
                for (std::size_t j = 0; j < g.size(); ++j) db[j] = g[j] * a[j];
                accumulate(pgrad(1), std::move(db));
            }
            break;
        }
        case Op::Scale: {
            if (!wants(0)) break;
            Tensor d = g;
            for (double& v : d.data()) v *= n.scalar;
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::Transpose: {
            if (!wants(0)) break;
            const Shape& ps = pnode(0).value.shape();
            const std::size_t r = ps[ps.size() - 2], c = ps[ps.size() - 1];
            Tensor d(ps);
            const std::size_t nb = batch_count(ps);
            for (std::size_t b = 0; b < nb; ++b) {
                const double* src = g.data().data() + b * r * c;
                double* dst = d.data().data() + b * r * c;
                for (std::size_t x = 0; x < r; ++x) {
                    for (std::size_t y = 0; y < c; ++y) dst[x * c + y] = src[y * r + x];
                }
            }
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::Reshape: {
            if (wants(0)) accumulate(pgrad(0), g.reshaped(pnode(0).value.shape()));
            break;
        }
        case Op::MaskedSoftmax: {
            if (!wants(0)) break;
            const Tensor& p = n.aux[0];
            const std::size_t cols = p.dim(p.rank() - 1);
            Tensor d(p.shape());
            kernels::softmax_rows_backward(p.size() / cols, cols, p.data().data(), g.data().data(),
                                           d.data().data());
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::LayerNorm: {
            const Tensor& xhat = n.aux[0];
            const Tensor& inv_std = n.aux[1];
            const Tensor& gain = pnode(1).value;
            const std::size_t d = gain.size();
            const std::size_t rows = xhat.size() / d;
            if (wants(0)) {
                Tensor dx(xhat.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* gr = g.data().data() + r * d;
                    const double* hr = xhat.data().data() + r * d;
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gain[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= static_cast<double>(d);
                    mean_dh_h /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = gr[j] * gain[j];
                        dx[r * d + j] = inv_std[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                accumulate(pgrad(0), std::move(dx));
            }
            if (wants(1)) {
                Tensor dg(pnode(1).value.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) dg[j] += g[r * d + j] * xhat[r * d + j];
                }
                accumulate(pgrad(1), std::move(dg));
            }
            if (wants(2)) {
                Tensor dbias(pnode(2).value.shape());
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t j = 0; j < d; ++j) dbias[j] += g[r * d + j];
                }
                accumulate(pgrad(2), std::move(dbias));
            }
            break;
        }
        case Op::Rotary: {
            if (!wants(0)) break;
            const Tensor& cs = n.aux[0];
            const Shape& s = n.value.shape();
            const std::size_t t = s[s.size() - 2], d = s[s.size() - 1];
            Tensor dx(s);
            const std::size_t rows = dx.size() / d;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t p = r % t;
                const double* gr = g.data().data() + r * d;
                double* out = dx.data().data() + r * d;
                for (std::size_t q = 0; q < d / 2; ++q) {
                    const double c = cs[(p * (d / 2) + q) * 2], sn = cs[(p * (d / 2) + q) * 2 + 1];
                    out[2 * q] = gr[2 * q] * c + gr[2 * q + 1] * sn;
                    out[2 * q + 1] = -gr[2 * q] * sn + gr[2 * q + 1] * c;
                }
            }
            accumulate(pgrad(0), std::move(dx));
            break;
        }
        case Op::GatherRows: {
            if (!wants(0)) break;
            const Tensor& tab = pnode(0).value;
            const std::size_t w = tab.rank() >= 2 ? tab.dim(tab.rank() - 1) : 1;
            Tensor d(tab.shape());
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                double* dst = d.data().data() + n.indices[r] * w;
                const double* src = g.data().data() + r * w;
                for (std::size_t j = 0; j < w; ++j) dst[j] += src[j];
            }
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::GatherElements: {
            if (!wants(0)) break;
            Tensor d(pnode(0).value.shape());
            for (std::size_t j = 0; j < n.source_map.size(); ++j) {
                if (n.source_map[j] >= 0) d[static_cast<std::size_t>(n.source_map[j])] += g[j];
            }
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::Concat: {
            const AxisSplit os = split_at(n.value.shape(), n.axis);
            std::size_t offset = 0;
            for (std::size_t k = 0; k < n.parents.size(); ++k) {
                const Shape& ps = pnode(k).value.shape();
                const AxisSplit ts = split_at(ps, n.axis);
                if (wants(k)) {
                    Tensor d(ps);
                    for (std::size_t o = 0; o < ts.outer; ++o) {
                        std::copy_n(g.data().data() + (o * os.len + offset) * os.inner,
                                    ts.len * ts.inner, d.data().data() + o * ts.len * ts.inner);
                    }
                    accumulate(pgrad(k), std::move(d));
                }
                offset += ts.len;
            }
            break;
        }
        case Op::Slice: {
            if (!wants(0)) break;
            const Shape& ps = pnode(0).value.shape();
            Tensor d(ps);
            const AxisSplit xs = split_at(ps, n.axis);
            for (std::size_t o = 0; o < xs.outer; ++o) {
                std::copy_n(g.data().data() + o * n.length * xs.inner, n.length * xs.inner,
                            d.data().data() + (o * xs.len + n.start) * xs.inner);
            }
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::CrossEntropy: {
            if (!wants(0)) break;
            const Tensor& probs = n.aux[0];
            const Shape& ps = pnode(0).value.shape();
            const std::size_t c = ps.back();
            Tensor d(ps);
            const double scale = g[0] / static_cast<double>(n.indices.size());
            for (std::size_t r = 0; r < n.indices.size(); ++r) {
                double* dst = d.data().data() + n.indices[r] * c;
                for (std::size_t j = 0; j < c; ++j) dst[j] += scale * probs[r * c + j];
                dst[n.targets[r]] -= scale;
            }
            accumulate(pgrad(0), std::move(d));
            break;
        }
        case Op::Sum: {
            if (!wants(0)) break;
            accumulate(pgrad(0), Tensor(pnode(0).value.shape(), g[0]));
            break;
        }
    }
}

// ---------------------------------------------------------------- gradient check

double GradientCheckReport::worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
}

GradientCheckReport check_gradients(Graph& graph, const Bindings& bindings, NodeId loss,
                                    double step, double floor, bool extrapolate) {
    if (!(step > 0.0)) throw GraphError("check_gradients: step must be positive");
    graph.evaluate(bindings);
    graph.backward(loss);

    GradientCheckReport report;
    for (const auto& [id, t0] : bindings) {
        (void)t0;
        report.entries.push_back({id, graph.describe(id)});
    }
    std::vector<Tensor> analytic;
    for (const auto& [id, t0] : bindings) analytic.push_back(graph.grad(id));

    auto loss_at = [&](NodeId id, const Tensor& t) {
        graph.bind(id, t);
        graph.evaluate();
        const double v = graph.value(loss).item();
        if (!std::isfinite(v)) {
            throw GraphError("check_gradients: non-finite loss at perturbed point of " +
                             graph.describe(id));
        }
        return v;
    };

    for (std::size_t b = 0; b < bindings.size(); ++b) {
        const auto& [id, t0] = bindings[b];
        Tensor work = t0;
        auto& entry = report.entries[b];
        auto central = [&](std::size_t j, double h) {
            const double orig = work[j];
            work[j] = orig + h;
            const double up = loss_at(id, work);
            work[j] = orig - h;
            const double down = loss_at(id, work);
            work[j] = orig;
            return (up - down) / (2.0 * h);
        };
        for (std::size_t j = 0; j < work.size(); ++j) {
            // Richardson: cancels the h^2 term of the central difference.
            const double numeric =
                extrapolate ? (4.0 * central(j, step / 2) - central(j, step)) / 3.0 : central(j, step);
            const double a = analytic[b][j];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            if (j == 0 || rel > entry.max_rel_error) {
                entry.max_rel_error = rel;
                entry.worst_index = j;
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        graph.bind(id, t0);
    }
    graph.evaluate();
    return report;
}

}  // namespace optolab
