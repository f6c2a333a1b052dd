#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dosfl/errors.hpp"
#include "dosfl/rng.hpp"

namespace dosfl {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T> class Tensor;

namespace detail {

// VJP builder: given the op's own output tensor and the upstream adjoint,
// emit one adjoint per input (an undefined Tensor where need[i] is false).
// Adjoints are built out of ordinary ops, so they are themselves
// differentiable; that is what makes nested grad() calls exact rather than
// a first-order approximation that drops second-order terms.
template <typename T>
using VjpFn = std::function<std::vector<Tensor<T>>(
    const Tensor<T>& self, const Tensor<T>& upstream, const std::vector<char>& need)>;

// Forward re-execution from input buffers, for tape replay.
template <typename T>
using RecomputeFn =
    std::function<std::vector<T>(const std::vector<const std::vector<T>*>& inputs)>;

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<Tensor<T>> inputs;
    VjpFn<T> vjp;
    RecomputeFn<T> recompute;

    ~Node();
};

} // namespace detail

// Dense real tensor with reverse-mode autodiff. A Tensor is a cheap handle to
// an immutable graph node; ops never modify their inputs. A graph is confined
// to one thread; distinct threads may build distinct graphs concurrently with
// no shared mutable state.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    static Tensor from(std::vector<T> data, Shape shape) {
        if (static_cast<int64_t>(data.size()) != shape_numel(shape))
            throw ContractViolation("tensor data size " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
        Tensor t;
        t.n_ = std::make_shared<detail::Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(data);
        return t;
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

    static Tensor full(Shape shape, T value) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)), value);
        return from(std::move(d), std::move(shape));
    }

    static Tensor scalar(T value) { return from(std::vector<T>{value}, Shape{}); }

    static Tensor randn(Shape shape, Rng& rng) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = static_cast<T>(rng.normal());
        return from(std::move(d), std::move(shape));
    }

    static Tensor uniform(Shape shape, T lo, T hi, Rng& rng) {
        std::vector<T> d(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : d) v = static_cast<T>(rng.uniform(lo, hi));
        return from(std::move(d), std::move(shape));
    }

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    int64_t numel() const { return n_ ? shape_numel(n_->shape) : 0; }
    bool is_leaf() const { return n_->inputs.empty() && !n_->vjp; }
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const char* op_name() const { return n_->op; }

    Tensor& set_requires_grad(bool rg) {
        if (!is_leaf())
            throw ContractViolation("requires_grad may only be toggled on leaf tensors");
        n_->requires_grad = rg;
        return *this;
    }

    std::span<const T> data() const { return {n_->data.data(), n_->data.size()}; }

    // Direct write access for leaves the caller owns (optimizer updates etc.).
    std::vector<T>& mutable_data() {
        if (!is_leaf())
            throw ContractViolation("mutable_data is restricted to leaf tensors");
        return n_->data;
    }

    T item() const {
        if (numel() != 1)
            throw ContractViolation("item() on tensor of " + std::to_string(numel()) +
                                    " elements");
        return n_->data[0];
    }

    // Fresh leaf with the same values and no history.
    Tensor detach() const { return from(std::vector<T>(n_->data), n_->shape); }

    bool same_node(const Tensor& o) const { return n_ == o.n_; }
    detail::Node<T>* node() const { return n_.get(); }

private:
    std::shared_ptr<detail::Node<T>> n_;

    friend struct detail::Node<T>;

    template <typename U>
    friend Tensor<U> make_op(const char* name, Shape shape, std::vector<U> data,
                             std::vector<Tensor<U>> inputs, detail::VjpFn<U> vjp,
                             detail::RecomputeFn<U> recompute);
};

namespace detail {

// Iterative teardown: unrolled training loops build op chains thousands of
// nodes deep, which would otherwise recurse once per node through shared_ptr
// destructors and overflow the stack.
template <typename T>
Node<T>::~Node() {
    if (inputs.empty()) return;
    std::vector<std::shared_ptr<Node<T>>> stack;
    auto drain = [&stack](std::vector<Tensor<T>>& ins) {
        for (Tensor<T>& t : ins) {
            std::shared_ptr<Node<T>>& p = t.n_;
            if (p && p.use_count() == 1) stack.push_back(std::move(p));
        }
        ins.clear();
    };
    drain(inputs);
    while (!stack.empty()) {
        std::shared_ptr<Node<T>> n = std::move(stack.back());
        stack.pop_back();
        drain(n->inputs);
        // n dies here with no children attached, so destruction stays flat
    }
}

template <typename T>
inline void check_all_finite(const char* op, const std::vector<T>& data) {
    for (const T& v : data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw DivergenceError(std::string("non-finite value produced by op '") + op + "'");
    }
}

} // namespace detail

// Graph node factory used by every op. Propagates requires_grad and enforces
// the all-finite invariant on produced values.
template <typename T>
Tensor<T> make_op(const char* name, Shape shape, std::vector<T> data,
                  std::vector<Tensor<T>> inputs, detail::VjpFn<T> vjp,
                  detail::RecomputeFn<T> recompute) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
        throw ContractViolation(std::string("op '") + name + "' produced " +
                                std::to_string(data.size()) + " values for shape " +
                                shape_str(shape));
    detail::check_all_finite(name, data);
    Tensor<T> t;
    t.n_ = std::make_shared<detail::Node<T>>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    t.n_->op = name;
    bool rg = false;
    for (const auto& in : inputs) rg = rg || in.requires_grad();
    t.n_->requires_grad = rg;
    t.n_->inputs = std::move(inputs);
    t.n_->vjp = std::move(vjp);
    t.n_->recompute = std::move(recompute);
    return t;
}

namespace detail {

// Deterministic post-order over the graph below `root` (inputs before
// consumers). Iterative for the same stack-depth reason as ~Node.
template <typename T>
std::vector<Tensor<T>> topo_order(const Tensor<T>& root) {
    std::vector<Tensor<T>> order;
    std::unordered_set<const Node<T>*> seen;
    struct Frame {
        Tensor<T> t;
        size_t next_child = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({root});
    seen.insert(root.node());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& ins = f.t.node()->inputs;
        if (f.next_child < ins.size()) {
            const Tensor<T>& child = ins[f.next_child++];
            if (seen.insert(child.node()).second) stack.push_back({child});
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace detail

struct GradOptions {
    // When true, the returned gradients carry graph history and can be
    // differentiated again (needed for meta-gradients). When false they are
    // detached leaves.
    bool create_graph = false;
};

// Maximum number of simultaneously active grad() computations per thread.
inline constexpr int kMaxGradNesting = 10;

namespace detail {
inline thread_local int grad_nesting_depth = 0;

struct NestingGuard {
    NestingGuard() {
        if (++grad_nesting_depth > kMaxGradNesting)
            throw ContractViolation("grad nesting depth exceeds supported maximum of " +
                                    std::to_string(kMaxGradNesting));
    }
    ~NestingGuard() { --grad_nesting_depth; }
};
} // namespace detail

// Reverse-mode differentiation of a recorded scalar w.r.t. arbitrary tensors
// already in its graph. Returns one gradient per entry of `wrt`, zeros when
// the scalar does not depend on it.
template <typename T>
std::vector<Tensor<T>> grad_wrt(const Tensor<T>& output, const std::vector<Tensor<T>>& wrt,
                                GradOptions opt = {}) {
    detail::NestingGuard guard;
    if (output.numel() != 1)
        throw ContractViolation("grad requires a scalar output, got shape " +
                                shape_str(output.shape()));
    if (!std::isfinite(static_cast<double>(output.item())))
        throw DivergenceError("grad of a non-finite scalar");

    std::unordered_set<const detail::Node<T>*> wrt_set;
    for (const auto& w : wrt) wrt_set.insert(w.node());

    std::vector<Tensor<T>> order = detail::topo_order(output);

    // A node needs an adjoint only when a wrt tensor is reachable from it
    // through the input edges. Pruning by the wrt set (rather than by
    // requires_grad ancestry) keeps nested backward passes from re-deriving
    // the whole recorded history at every inner step.
    std::unordered_map<const detail::Node<T>*, char> needed;
    needed.reserve(order.size());
    for (const Tensor<T>& t : order) { // post-order: inputs come first
        bool need = wrt_set.count(t.node()) > 0;
        if (!need) {
            for (const auto& in : t.node()->inputs) {
                if (needed[in.node()]) { need = true; break; }
            }
        }
        needed[t.node()] = need ? 1 : 0;
    }

    std::unordered_map<const detail::Node<T>*, Tensor<T>> adjoint;
    adjoint.reserve(order.size());
    adjoint[output.node()] = Tensor<T>::full(output.shape(), T(1));

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const Tensor<T>& t = *it;
        auto found = adjoint.find(t.node());
        if (found == adjoint.end()) continue;
        if (!t.node()->vjp) continue;
        const auto& ins = t.node()->inputs;
        std::vector<char> need(ins.size(), 0);
        bool any = false;
        for (size_t i = 0; i < ins.size(); ++i) {
            need[i] = needed[ins[i].node()];
            any = any || need[i];
        }
        if (!any) continue;
        std::vector<Tensor<T>> gs = t.node()->vjp(t, found->second, need);
        if (gs.size() != ins.size())
            throw ContractViolation(std::string("vjp of op '") + t.node()->op +
                                    "' returned wrong arity");
        for (size_t i = 0; i < ins.size(); ++i) {
            if (!need[i] || !gs[i].defined()) continue;
            auto acc = adjoint.find(ins[i].node());
            if (acc == adjoint.end()) {
                adjoint.emplace(ins[i].node(), gs[i]);
            } else {
                acc->second = accumulate_adjoint(acc->second, gs[i]);
            }
        }
    }

    std::vector<Tensor<T>> result;
    result.reserve(wrt.size());
    for (const auto& w : wrt) {
        auto found = adjoint.find(w.node());
        Tensor<T> g = (found == adjoint.end()) ? Tensor<T>::zeros(w.shape()) : found->second;
        result.push_back(opt.create_graph ? g : g.detach());
    }
    return result;
}

// Functional form: evaluate `f` on requires-grad views of `inputs` and return
// d f / d inputs. `f` must produce a single finite scalar. Inputs that are
// already requires-grad leaves are used in place, so a grad() call inside the
// body of another stays graph-connected and the outer derivative is exact.
template <typename T>
std::vector<Tensor<T>> grad(const std::function<Tensor<T>(const std::vector<Tensor<T>>&)>& f,
                            const std::vector<Tensor<T>>& inputs, GradOptions opt = {}) {
    detail::NestingGuard guard;
    std::vector<Tensor<T>> leaves;
    leaves.reserve(inputs.size());
    for (const auto& in : inputs)
        leaves.push_back((in.is_leaf() && in.requires_grad())
                             ? in
                             : in.detach().set_requires_grad(true));
    Tensor<T> out = f(leaves);
    return grad_wrt(out, leaves, opt);
}

// Ordered record of the primitive ops below a root value. Replaying the tape
// re-executes every op's forward kernel from the recorded leaf buffers;
// nesting falls out of the graph structure (the reverse pass of an inner
// grad, run with create_graph, is itself made of recorded ops).
template <typename T>
class GradTape {
public:
    explicit GradTape(Tensor<T> root) : root_(std::move(root)), order_(detail::topo_order(root_)) {}

    size_t num_ops() const {
        size_t n = 0;
        for (const auto& t : order_)
            if (t.node()->vjp) ++n;
        return n;
    }

    size_t num_nodes() const { return order_.size(); }

    // Re-executes the recorded forward computation into fresh buffers and
    // returns the recomputed root value.
    Tensor<T> replay() const {
        std::unordered_map<const detail::Node<T>*, std::vector<T>> values;
        values.reserve(order_.size());
        for (const Tensor<T>& t : order_) {
            const detail::Node<T>* n = t.node();
            if (!n->recompute) {
                values[n] = std::vector<T>(t.data().begin(), t.data().end());
                continue;
            }
            std::vector<const std::vector<T>*> ins;
            ins.reserve(n->inputs.size());
            for (const auto& in : n->inputs) ins.push_back(&values.at(in.node()));
            values[n] = n->recompute(ins);
        }
        return Tensor<T>::from(std::move(values.at(root_.node())), root_.shape());
    }

private:
    Tensor<T> root_;
    std::vector<Tensor<T>> order_;
};

} // namespace dosfl
