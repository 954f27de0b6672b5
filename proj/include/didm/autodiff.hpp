#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <deque>
#include <vector>

#include "didm/error.hpp"
#include "didm/tensor.hpp"

namespace didm::ad {

inline constexpr double kLogEps = 1e-12;
inline constexpr double kNormEps = 1e-8;

using NodeId = std::size_t;

enum class OpKind : std::uint8_t {
    leaf,
    add,
    sub,
    mul,
    div,
    matmul,
    exp,
    log,
    relu,
    sigmoid,
    softmax_rowwise,
    sum,
    mean,
    squared_l2,
    l2_normalize_rowwise,
    cosine_similarity_rowpairs,
    kl_divergence_rowwise,
    concat,
    slice,
    scale,
    transpose,
    add_bias,
    gather_rows,
    detach,
};

inline constexpr std::array<std::pair<OpKind, std::string_view>, 24> kOpNames{{
    {OpKind::leaf, "leaf"},
    {OpKind::add, "add"},
    {OpKind::sub, "sub"},
    {OpKind::mul, "mul"},
    {OpKind::div, "div"},
    {OpKind::matmul, "matmul"},
    {OpKind::exp, "exp"},
    {OpKind::log, "log"},
    {OpKind::relu, "relu"},
    {OpKind::sigmoid, "sigmoid"},
    {OpKind::softmax_rowwise, "softmax_rowwise"},
    {OpKind::sum, "sum"},
    {OpKind::mean, "mean"},
    {OpKind::squared_l2, "squared_l2"},
    {OpKind::l2_normalize_rowwise, "l2_normalize_rowwise"},
    {OpKind::cosine_similarity_rowpairs, "cosine_similarity_rowpairs"},
    {OpKind::kl_divergence_rowwise, "kl_divergence_rowwise"},
    {OpKind::concat, "concat"},
    {OpKind::slice, "slice"},
    {OpKind::scale, "scale"},
    {OpKind::transpose, "transpose"},
    {OpKind::add_bias, "add_bias"},
    {OpKind::gather_rows, "gather_rows"},
    {OpKind::detach, "detach"},
}};

[[nodiscard]] inline std::string_view to_string(OpKind kind)
{
    for (const auto& [k, name] : kOpNames) {
        if (k == kind) {
            return name;
        }
    }
    return "unknown";
}

[[nodiscard]] inline OpKind op_kind_from_string(std::string_view name)
{
    for (const auto& [k, n] : kOpNames) {
        if (n == name && k != OpKind::leaf) {
            return k;
        }
    }
    throw Error("autodiff: unknown operation kind '" + std::string(name) + "'");
}

/// Per-kind parameters. Which fields are read depends on the kind:
/// scale reads `scalar`; div/log/l2_normalize/cosine read `eps`;
/// concat/slice read `axis`; slice reads `begin`/`end`; gather_rows reads `indices`.
struct OpAttrs {
    double scalar = 1.0;
    double eps = 0.0;
    std::size_t axis = 0;
    std::size_t begin = 0;
    std::size_t end = 0;
    std::vector<std::size_t> indices;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] NodeId id() const { return id_; }
    [[nodiscard]] bool requires_grad() const;
    [[nodiscard]] Graph& graph() const { return *graph_; }
    [[nodiscard]] bool valid() const { return graph_ != nullptr; }
    [[nodiscard]] std::size_t rows() const { return value().rows; }
    [[nodiscard]] std::size_t cols() const { return value().cols; }
    [[nodiscard]] double item() const { return value().item(); }

private:
    friend class Graph;
    Var(Graph* g, NodeId id) : graph_(g), id_(id) {}

    Graph* graph_ = nullptr;
    NodeId id_ = 0;
};

class GradientMap {
public:
    GradientMap() = default;
    explicit GradientMap(const Graph* owner) : owner_(owner) {}

    [[nodiscard]] bool contains(NodeId id) const { return grads_.count(id) != 0; }
    /// False for Vars of another graph, even when the node id exists here.
    [[nodiscard]] bool contains(const Var& v) const { return owns(v) && contains(v.id()); }

    [[nodiscard]] const Tensor& at(NodeId id) const
    {
        auto it = grads_.find(id);
        if (it == grads_.end()) {
            throw Error("autodiff: no gradient recorded for node " + std::to_string(id));
        }
        return it->second;
    }
    [[nodiscard]] const Tensor& at(const Var& v) const
    {
        if (!owns(v)) {
            throw Error("autodiff: gradient requested for a node of another graph");
        }
        return at(v.id());
    }

    [[nodiscard]] std::size_t size() const { return grads_.size(); }
    [[nodiscard]] auto begin() const { return grads_.begin(); }
    [[nodiscard]] auto end() const { return grads_.end(); }

    void set(NodeId id, Tensor g) { grads_[id] = std::move(g); }

private:
    [[nodiscard]] bool owns(const Var& v) const;

    const Graph* owner_ = nullptr;
    std::map<NodeId, Tensor> grads_;
};

namespace detail {

inline void require(bool ok, OpKind kind, const std::string& what)
{
    if (!ok) {
        throw ShapeError("autodiff: " + std::string(to_string(kind)) + ": " + what);
    }
}

inline std::string dims(const Tensor& t) { return t.shape_string(); }

// out[m×n] += a[m×k] · b[k×n], fixed i-k-j loop order.
inline void matmul_acc(const Tensor& a, const Tensor& b, Tensor& out)
{
    const std::size_t m = a.rows, k = a.cols, n = b.cols;
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = out.values.data() + i * n;
        const double* arow = a.values.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            const double* brow = b.values.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
}

// out[m×k] += g[m×n] · bᵀ where b is k×n.
inline void matmul_bt_acc(const Tensor& g, const Tensor& b, Tensor& out)
{
    const std::size_t m = g.rows, n = g.cols, k = b.rows;
    for (std::size_t i = 0; i < m; ++i) {
        const double* grow = g.values.data() + i * n;
        double* orow = out.values.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.values.data() + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                acc += grow[j] * brow[j];
            }
            orow[p] += acc;
        }
    }
}

// out[k×n] += aᵀ · g where a is m×k and g is m×n.
inline void matmul_at_acc(const Tensor& a, const Tensor& g, Tensor& out)
{
    const std::size_t m = a.rows, k = a.cols, n = g.cols;
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.values.data() + i * k;
        const double* grow = g.values.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) {
                continue;
            }
            double* orow = out.values.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * grow[j];
            }
        }
    }
}

inline double row_norm(const Tensor& t, std::size_t r)
{
    double s = 0.0;
    for (std::size_t c = 0; c < t.cols; ++c) {
        s += t(r, c) * t(r, c);
    }
    return std::sqrt(s);
}

}  // namespace detail

/// Tape of operations. Nodes are appended in construction order, which is
/// also a valid topological order for the reverse sweep.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = false)
    {
        Node n;
        n.kind = OpKind::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var apply(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {})
    {
        if (static_cast<std::size_t>(kind) >= kOpNames.size() || kind == OpKind::leaf) {
            throw Error("autodiff: unknown operation kind " + std::to_string(static_cast<int>(kind)));
        }
        std::vector<NodeId> ids;
        ids.reserve(inputs.size());
        bool needs = false;
        for (const Var& v : inputs) {
            if (v.graph_ != this) {
                throw Error("autodiff: " + std::string(to_string(kind)) + ": input belongs to another graph");
            }
            ids.push_back(v.id_);
            needs = needs || nodes_[v.id_].requires_grad;
        }
        Node n;
        n.kind = kind;
        n.inputs = std::move(ids);
        n.attrs = attrs;
        n.value = forward(n);
        n.requires_grad = needs && kind != OpKind::detach;
        if (kind == OpKind::detach) {
            if (frozen_cursor_ < frozen_.size()) {
                const Tensor& f = frozen_[frozen_cursor_];
                detail::require(f.same_shape(n.value), kind, "replayed value has shape " + detail::dims(f) +
                                                                 ", expected " + detail::dims(n.value));
                n.value = f;
            }
            ++frozen_cursor_;
            detached_.push_back(n.value);
        }
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    Var apply(OpKind kind, std::initializer_list<Var> inputs, const OpAttrs& attrs = {})
    {
        return apply(kind, std::span<const Var>(inputs.begin(), inputs.size()), attrs);
    }

    /// Reverse sweep from a scalar root. Every requires_grad leaf of the graph
    /// gets an entry; leaves the root does not depend on get zeros.
    [[nodiscard]] GradientMap backward(const Var& root) const
    {
        if (root.graph_ != this) {
            throw Error("autodiff: backward: root belongs to another graph");
        }
        const Tensor& rv = nodes_[root.id_].value;
        if (rv.size() != 1) {
            throw ShapeError("autodiff: backward: root must be scalar, got shape " + rv.shape_string());
        }
        std::vector<std::optional<Tensor>> grads(nodes_.size());
        if (nodes_[root.id_].requires_grad) {
            grads[root.id_] = Tensor(1, 1, 1.0);
        }
        std::vector<Tensor*> in_grads;
        for (std::size_t i = root.id_ + 1; i-- > 0;) {
            const Node& n = nodes_[i];
            if (!grads[i] || n.kind == OpKind::leaf || !n.requires_grad) {
                continue;
            }
            in_grads.assign(n.inputs.size(), nullptr);
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const NodeId in = n.inputs[k];
                if (!nodes_[in].requires_grad) {
                    continue;
                }
                if (!grads[in]) {
                    grads[in] = Tensor(nodes_[in].value.rows, nodes_[in].value.cols);
                }
                in_grads[k] = &*grads[in];
            }
            if (fault_ && fault_->first == n.kind) {
                // Scale this node's contribution only: compute into scratch, then add.
                std::vector<Tensor> scratch(n.inputs.size());
                std::vector<Tensor*> targets(n.inputs.size(), nullptr);
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    if (in_grads[k] != nullptr) {
                        scratch[k] = Tensor(in_grads[k]->rows, in_grads[k]->cols);
                        targets[k] = &scratch[k];
                    }
                }
                backward_node(n, *grads[i], targets);
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    if (targets[k] != nullptr) {
                        for (std::size_t e = 0; e < scratch[k].size(); ++e) {
                            in_grads[k]->values[e] += fault_->second * scratch[k].values[e];
                        }
                    }
                }
            } else {
                backward_node(n, *grads[i], in_grads);
            }
        }
        GradientMap out(this);
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            if (n.kind == OpKind::leaf && n.requires_grad) {
                out.set(i, grads[i] ? *grads[i] : Tensor(n.value.rows, n.value.cols));
            }
        }
        return out;
    }

    /// Test fixture: multiply the backward contribution of every `kind` node by `factor`.
    void inject_backward_fault(OpKind kind, double factor) { fault_ = std::make_pair(kind, factor); }

    /// Detach nodes created from now on take these values, in creation order,
    /// instead of their computed forward values. Used to hold stop-gradient
    /// quantities (weights, proposal choices) fixed while probing.
    void replay_detached(std::vector<Tensor> frozen)
    {
        frozen_ = std::move(frozen);
        frozen_cursor_ = 0;
    }

    [[nodiscard]] const std::vector<Tensor>& detached_values() const { return detached_; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }
    [[nodiscard]] const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
    [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

private:
    struct Node {
        OpKind kind = OpKind::leaf;
        Tensor value;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        bool requires_grad = false;
    };

    const Tensor& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].value; }

    Tensor forward(const Node& n) const
    {
        using detail::dims;
        using detail::require;
        const OpKind kind = n.kind;
        const auto arity = [&](std::size_t k) {
            require(n.inputs.size() == k, kind,
                    "expects " + std::to_string(k) + " inputs, got " + std::to_string(n.inputs.size()));
        };
        switch (kind) {
        case OpKind::add:
        case OpKind::sub:
        case OpKind::mul:
        case OpKind::div: {
            arity(2);
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            require(a.same_shape(b), kind, "shape mismatch " + dims(a) + " vs " + dims(b));
            Tensor out(a.rows, a.cols);
            for (std::size_t e = 0; e < a.size(); ++e) {
                const double x = a.values[e], y = b.values[e];
                switch (kind) {
                case OpKind::add: out.values[e] = x + y; break;
                case OpKind::sub: out.values[e] = x - y; break;
                case OpKind::mul: out.values[e] = x * y; break;
                default: out.values[e] = x / (y + n.attrs.eps); break;
                }
            }
            return out;
        }
        case OpKind::matmul: {
            arity(2);
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            require(a.cols == b.rows, kind, "inner dimensions differ " + dims(a) + " x " + dims(b));
            Tensor out(a.rows, b.cols);
            detail::matmul_acc(a, b, out);
            return out;
        }
        case OpKind::exp:
        case OpKind::log:
        case OpKind::relu:
        case OpKind::sigmoid:
        case OpKind::scale:
        case OpKind::detach: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(a.rows, a.cols);
            for (std::size_t e = 0; e < a.size(); ++e) {
                const double x = a.values[e];
                switch (kind) {
                case OpKind::exp: out.values[e] = std::exp(x); break;
                case OpKind::log: out.values[e] = std::log(x + n.attrs.eps); break;
                case OpKind::relu: out.values[e] = x > 0.0 ? x : 0.0; break;
                case OpKind::sigmoid:
                    out.values[e] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                    break;
                case OpKind::scale: out.values[e] = n.attrs.scalar * x; break;
                default: out.values[e] = x; break;
                }
            }
            return out;
        }
        case OpKind::softmax_rowwise: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(a.rows, a.cols);
            for (std::size_t r = 0; r < a.rows; ++r) {
                double mx = -INFINITY;
                for (std::size_t c = 0; c < a.cols; ++c) {
                    mx = std::max(mx, a(r, c));
                }
                double z = 0.0;
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(r, c) = std::exp(a(r, c) - mx);
                    z += out(r, c);
                }
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(r, c) /= z;
                }
            }
            return out;
        }
        case OpKind::sum:
        case OpKind::mean: {
            arity(1);
            const Tensor& a = in(n, 0);
            double s = 0.0;
            for (double v : a.values) {
                s += v;
            }
            if (kind == OpKind::mean) {
                require(a.size() > 0, kind, "mean of empty tensor");
                s /= static_cast<double>(a.size());
            }
            return Tensor::scalar(s);
        }
        case OpKind::squared_l2: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(a.rows, 1);
            for (std::size_t r = 0; r < a.rows; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < a.cols; ++c) {
                    s += a(r, c) * a(r, c);
                }
                out(r, 0) = s;
            }
            return out;
        }
        case OpKind::l2_normalize_rowwise: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(a.rows, a.cols);
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double nr = std::max(detail::row_norm(a, r), n.attrs.eps);
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(r, c) = a(r, c) / nr;
                }
            }
            return out;
        }
        case OpKind::cosine_similarity_rowpairs: {
            arity(2);
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            require(a.same_shape(b), kind, "shape mismatch " + dims(a) + " vs " + dims(b));
            Tensor out(a.rows, 1);
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double na = std::max(detail::row_norm(a, r), n.attrs.eps);
                const double nb = std::max(detail::row_norm(b, r), n.attrs.eps);
                double dot = 0.0;
                for (std::size_t c = 0; c < a.cols; ++c) {
                    dot += a(r, c) * b(r, c);
                }
                out(r, 0) = dot / (na * nb);
            }
            return out;
        }
        case OpKind::kl_divergence_rowwise: {
            arity(2);
            const Tensor& p = in(n, 0);
            const Tensor& q = in(n, 1);
            require(p.same_shape(q), kind, "shape mismatch " + dims(p) + " vs " + dims(q));
            Tensor out(p.rows, 1);
            for (std::size_t r = 0; r < p.rows; ++r) {
                double s = 0.0;
                for (std::size_t c = 0; c < p.cols; ++c) {
                    const double pv = p(r, c);
                    s += pv * (std::log(pv + n.attrs.eps) - std::log(q(r, c) + n.attrs.eps));
                }
                out(r, 0) = s;
            }
            return out;
        }
        case OpKind::concat: {
            require(!n.inputs.empty(), kind, "needs at least one input");
            require(n.attrs.axis <= 1, kind, "axis must be 0 or 1");
            const Tensor& first = in(n, 0);
            std::size_t total = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const Tensor& t = in(n, k);
                if (n.attrs.axis == 0) {
                    require(t.cols == first.cols, kind, "column mismatch " + dims(first) + " vs " + dims(t));
                    total += t.rows;
                } else {
                    require(t.rows == first.rows, kind, "row mismatch " + dims(first) + " vs " + dims(t));
                    total += t.cols;
                }
            }
            if (n.attrs.axis == 0) {
                Tensor out(total, first.cols);
                std::size_t off = 0;
                for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                    const Tensor& t = in(n, k);
                    std::copy(t.values.begin(), t.values.end(), out.values.begin() + static_cast<long>(off));
                    off += t.size();
                }
                return out;
            }
            Tensor out(first.rows, total);
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const Tensor& t = in(n, k);
                for (std::size_t r = 0; r < t.rows; ++r) {
                    for (std::size_t c = 0; c < t.cols; ++c) {
                        out(r, off + c) = t(r, c);
                    }
                }
                off += t.cols;
            }
            return out;
        }
        case OpKind::slice: {
            arity(1);
            const Tensor& a = in(n, 0);
            require(n.attrs.axis <= 1, kind, "axis must be 0 or 1");
            const std::size_t lim = n.attrs.axis == 0 ? a.rows : a.cols;
            require(n.attrs.begin <= n.attrs.end && n.attrs.end <= lim, kind,
                    "range [" + std::to_string(n.attrs.begin) + ", " + std::to_string(n.attrs.end) +
                        ") outside axis of size " + std::to_string(lim));
            const std::size_t len = n.attrs.end - n.attrs.begin;
            if (n.attrs.axis == 0) {
                Tensor out(len, a.cols);
                for (std::size_t r = 0; r < len; ++r) {
                    for (std::size_t c = 0; c < a.cols; ++c) {
                        out(r, c) = a(n.attrs.begin + r, c);
                    }
                }
                return out;
            }
            Tensor out(a.rows, len);
            for (std::size_t r = 0; r < a.rows; ++r) {
                for (std::size_t c = 0; c < len; ++c) {
                    out(r, c) = a(r, n.attrs.begin + c);
                }
            }
            return out;
        }
        case OpKind::transpose: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(a.cols, a.rows);
            for (std::size_t r = 0; r < a.rows; ++r) {
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(c, r) = a(r, c);
                }
            }
            return out;
        }
        case OpKind::add_bias: {
            arity(2);
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            require(b.rows == 1 && b.cols == a.cols, kind, "bias " + dims(b) + " does not fit " + dims(a));
            Tensor out(a.rows, a.cols);
            for (std::size_t r = 0; r < a.rows; ++r) {
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(r, c) = a(r, c) + b(0, c);
                }
            }
            return out;
        }
        case OpKind::gather_rows: {
            arity(1);
            const Tensor& a = in(n, 0);
            Tensor out(n.attrs.indices.size(), a.cols);
            for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
                const std::size_t src = n.attrs.indices[r];
                require(src < a.rows, kind,
                        "row index " + std::to_string(src) + " outside " + std::to_string(a.rows) + " rows");
                for (std::size_t c = 0; c < a.cols; ++c) {
                    out(r, c) = a(src, c);
                }
            }
            return out;
        }
        case OpKind::leaf:
            break;
        }
        throw Error("autodiff: unknown operation kind " + std::to_string(static_cast<int>(kind)));
    }

    // Accumulates d(root)/d(input_k) into *out[k] for every non-null target.
    void backward_node(const Node& n, const Tensor& g, std::span<Tensor* const> out) const
    {
        const auto acc = [&](std::size_t k) -> Tensor* { return out[k]; };
        switch (n.kind) {
        case OpKind::add:
            if (Tensor* ga = acc(0)) {
                for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e];
            }
            if (Tensor* gb = acc(1)) {
                for (std::size_t e = 0; e < g.size(); ++e) gb->values[e] += g.values[e];
            }
            return;
        case OpKind::sub:
            if (Tensor* ga = acc(0)) {
                for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e];
            }
            if (Tensor* gb = acc(1)) {
                for (std::size_t e = 0; e < g.size(); ++e) gb->values[e] -= g.values[e];
            }
            return;
        case OpKind::mul: {
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            if (Tensor* ga = acc(0)) {
                for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e] * b.values[e];
            }
            if (Tensor* gb = acc(1)) {
                for (std::size_t e = 0; e < g.size(); ++e) gb->values[e] += g.values[e] * a.values[e];
            }
            return;
        }
        case OpKind::div: {
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            for (std::size_t e = 0; e < g.size(); ++e) {
                const double den = b.values[e] + n.attrs.eps;
                if (Tensor* ga = acc(0)) ga->values[e] += g.values[e] / den;
                if (Tensor* gb = acc(1)) gb->values[e] -= g.values[e] * a.values[e] / (den * den);
            }
            return;
        }
        case OpKind::matmul:
            if (Tensor* ga = acc(0)) detail::matmul_bt_acc(g, in(n, 1), *ga);
            if (Tensor* gb = acc(1)) detail::matmul_at_acc(in(n, 0), g, *gb);
            return;
        case OpKind::exp: {
            const Tensor& y = n.value;
            Tensor* ga = acc(0);
            for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e] * y.values[e];
            return;
        }
        case OpKind::log: {
            const Tensor& a = in(n, 0);
            Tensor* ga = acc(0);
            for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e] / (a.values[e] + n.attrs.eps);
            return;
        }
        case OpKind::relu: {
            const Tensor& a = in(n, 0);
            Tensor* ga = acc(0);
            for (std::size_t e = 0; e < g.size(); ++e) {
                if (a.values[e] > 0.0) ga->values[e] += g.values[e];
            }
            return;
        }
        case OpKind::sigmoid: {
            const Tensor& y = n.value;
            Tensor* ga = acc(0);
            for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e] * y.values[e] * (1.0 - y.values[e]);
            return;
        }
        case OpKind::scale: {
            Tensor* ga = acc(0);
            for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += n.attrs.scalar * g.values[e];
            return;
        }
        case OpKind::softmax_rowwise: {
            const Tensor& y = n.value;
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < y.rows; ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols; ++c) dot += g(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols; ++c) (*ga)(r, c) += y(r, c) * (g(r, c) - dot);
            }
            return;
        }
        case OpKind::sum:
        case OpKind::mean: {
            Tensor* ga = acc(0);
            const double s = n.kind == OpKind::mean ? g.item() / static_cast<double>(ga->size()) : g.item();
            for (double& v : ga->values) v += s;
            return;
        }
        case OpKind::squared_l2: {
            const Tensor& a = in(n, 0);
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < a.rows; ++r) {
                for (std::size_t c = 0; c < a.cols; ++c) (*ga)(r, c) += 2.0 * a(r, c) * g(r, 0);
            }
            return;
        }
        case OpKind::l2_normalize_rowwise: {
            const Tensor& a = in(n, 0);
            const Tensor& y = n.value;
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double raw = detail::row_norm(a, r);
                if (raw > n.attrs.eps) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < a.cols; ++c) dot += y(r, c) * g(r, c);
                    for (std::size_t c = 0; c < a.cols; ++c) (*ga)(r, c) += (g(r, c) - y(r, c) * dot) / raw;
                } else {
                    for (std::size_t c = 0; c < a.cols; ++c) (*ga)(r, c) += g(r, c) / n.attrs.eps;
                }
            }
            return;
        }
        case OpKind::cosine_similarity_rowpairs: {
            const Tensor& a = in(n, 0);
            const Tensor& b = in(n, 1);
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double ra = detail::row_norm(a, r), rb = detail::row_norm(b, r);
                const double na = std::max(ra, n.attrs.eps), nb = std::max(rb, n.attrs.eps);
                const double cosv = n.value(r, 0);
                const double gr = g(r, 0);
                for (std::size_t c = 0; c < a.cols; ++c) {
                    if (Tensor* ga = acc(0)) {
                        double d = b(r, c) / (na * nb);
                        if (ra > n.attrs.eps) d -= cosv * a(r, c) / (na * na);
                        (*ga)(r, c) += gr * d;
                    }
                    if (Tensor* gb = acc(1)) {
                        double d = a(r, c) / (na * nb);
                        if (rb > n.attrs.eps) d -= cosv * b(r, c) / (nb * nb);
                        (*gb)(r, c) += gr * d;
                    }
                }
            }
            return;
        }
        case OpKind::kl_divergence_rowwise: {
            const Tensor& p = in(n, 0);
            const Tensor& q = in(n, 1);
            const double eps = n.attrs.eps;
            for (std::size_t r = 0; r < p.rows; ++r) {
                const double gr = g(r, 0);
                for (std::size_t c = 0; c < p.cols; ++c) {
                    const double pv = p(r, c), qv = q(r, c);
                    if (Tensor* gp = acc(0)) {
                        (*gp)(r, c) += gr * (std::log(pv + eps) - std::log(qv + eps) + pv / (pv + eps));
                    }
                    if (Tensor* gq = acc(1)) (*gq)(r, c) -= gr * pv / (qv + eps);
                }
            }
            return;
        }
        case OpKind::concat: {
            std::size_t off = 0;
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                const Tensor& t = in(n, k);
                Tensor* gk = acc(k);
                if (n.attrs.axis == 0) {
                    if (gk) {
                        for (std::size_t e = 0; e < t.size(); ++e) gk->values[e] += g.values[off + e];
                    }
                    off += t.size();
                } else {
                    if (gk) {
                        for (std::size_t r = 0; r < t.rows; ++r) {
                            for (std::size_t c = 0; c < t.cols; ++c) (*gk)(r, c) += g(r, off + c);
                        }
                    }
                    off += t.cols;
                }
            }
            return;
        }
        case OpKind::slice: {
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < g.rows; ++r) {
                for (std::size_t c = 0; c < g.cols; ++c) {
                    if (n.attrs.axis == 0) {
                        (*ga)(n.attrs.begin + r, c) += g(r, c);
                    } else {
                        (*ga)(r, n.attrs.begin + c) += g(r, c);
                    }
                }
            }
            return;
        }
        case OpKind::transpose: {
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < g.rows; ++r) {
                for (std::size_t c = 0; c < g.cols; ++c) (*ga)(c, r) += g(r, c);
            }
            return;
        }
        case OpKind::add_bias:
            if (Tensor* ga = acc(0)) {
                for (std::size_t e = 0; e < g.size(); ++e) ga->values[e] += g.values[e];
            }
            if (Tensor* gb = acc(1)) {
                for (std::size_t r = 0; r < g.rows; ++r) {
                    for (std::size_t c = 0; c < g.cols; ++c) (*gb)(0, c) += g(r, c);
                }
            }
            return;
        case OpKind::gather_rows: {
            Tensor* ga = acc(0);
            for (std::size_t r = 0; r < n.attrs.indices.size(); ++r) {
                const std::size_t dst = n.attrs.indices[r];
                for (std::size_t c = 0; c < g.cols; ++c) (*ga)(dst, c) += g(r, c);
            }
            return;
        }
        case OpKind::detach:
        case OpKind::leaf:
            return;
        }
    }

    // deque: values handed out by reference stay valid as the tape grows.
    std::deque<Node> nodes_;
    std::optional<std::pair<OpKind, double>> fault_;
    std::vector<Tensor> frozen_;
    std::size_t frozen_cursor_ = 0;
    std::vector<Tensor> detached_;
};

inline bool GradientMap::owns(const Var& v) const { return owner_ == nullptr || owner_ == &v.graph(); }

inline const Tensor& Var::value() const { return graph_->value(id_); }
inline bool Var::requires_grad() const { return graph_->requires_grad(id_); }

// Convenience wrappers. Each records exactly one node.

inline Var add(const Var& a, const Var& b) { return a.graph().apply(OpKind::add, {a, b}); }
inline Var sub(const Var& a, const Var& b) { return a.graph().apply(OpKind::sub, {a, b}); }
inline Var mul(const Var& a, const Var& b) { return a.graph().apply(OpKind::mul, {a, b}); }

/// a / (b + eps). Pass a positive eps wherever the denominator can reach zero.
inline Var div(const Var& a, const Var& b, double eps = 0.0)
{
    OpAttrs at;
    at.eps = eps;
    return a.graph().apply(OpKind::div, {a, b}, at);
}

inline Var matmul(const Var& a, const Var& b) { return a.graph().apply(OpKind::matmul, {a, b}); }
inline Var exp(const Var& a) { return a.graph().apply(OpKind::exp, {a}); }

/// ln(a + eps).
inline Var log(const Var& a, double eps = kLogEps)
{
    OpAttrs at;
    at.eps = eps;
    return a.graph().apply(OpKind::log, {a}, at);
}

inline Var relu(const Var& a) { return a.graph().apply(OpKind::relu, {a}); }
inline Var sigmoid(const Var& a) { return a.graph().apply(OpKind::sigmoid, {a}); }
inline Var softmax_rows(const Var& a) { return a.graph().apply(OpKind::softmax_rowwise, {a}); }
inline Var sum(const Var& a) { return a.graph().apply(OpKind::sum, {a}); }
inline Var mean(const Var& a) { return a.graph().apply(OpKind::mean, {a}); }
inline Var squared_l2(const Var& a) { return a.graph().apply(OpKind::squared_l2, {a}); }

/// x / max(‖x‖, eps) per row.
inline Var l2_normalize_rows(const Var& a, double eps = kNormEps)
{
    OpAttrs at;
    at.eps = eps;
    return a.graph().apply(OpKind::l2_normalize_rowwise, {a}, at);
}

inline Var cosine_rowpairs(const Var& a, const Var& b, double eps = kNormEps)
{
    OpAttrs at;
    at.eps = eps;
    return a.graph().apply(OpKind::cosine_similarity_rowpairs, {a, b}, at);
}

/// Σ_c p ln(p/q) per row, with both logs floored by eps (so 0·ln 0 = 0).
inline Var kl_rows(const Var& p, const Var& q, double eps = kLogEps)
{
    OpAttrs at;
    at.eps = eps;
    return p.graph().apply(OpKind::kl_divergence_rowwise, {p, q}, at);
}

inline Var concat(std::span<const Var> parts, std::size_t axis)
{
    if (parts.empty()) {
        throw ShapeError("autodiff: concat: needs at least one input");
    }
    OpAttrs at;
    at.axis = axis;
    return parts.front().graph().apply(OpKind::concat, parts, at);
}

inline Var slice(const Var& a, std::size_t axis, std::size_t begin, std::size_t end)
{
    OpAttrs at;
    at.axis = axis;
    at.begin = begin;
    at.end = end;
    return a.graph().apply(OpKind::slice, {a}, at);
}

inline Var scale(const Var& a, double s)
{
    OpAttrs at;
    at.scalar = s;
    return a.graph().apply(OpKind::scale, {a}, at);
}

inline Var transpose(const Var& a) { return a.graph().apply(OpKind::transpose, {a}); }
inline Var add_bias(const Var& a, const Var& bias) { return a.graph().apply(OpKind::add_bias, {a, bias}); }

inline Var gather_rows(const Var& a, std::vector<std::size_t> indices)
{
    OpAttrs at;
    at.indices = std::move(indices);
    return a.graph().apply(OpKind::gather_rows, {a}, at);
}

inline Var detach(const Var& a) { return a.graph().apply(OpKind::detach, {a}); }

}  // namespace didm::ad
