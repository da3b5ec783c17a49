#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <string_view>
#include <vector>

#include "cdlm/tensor.hpp"

namespace cdlm {

template <typename T>
class Graph;

/// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
template <typename T>
struct Var {
    Graph<T>* graph = nullptr;
    std::uint32_t id = 0;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t size() const { return value().size(); }
    /// Adjoint computed by the last backward pass; empty when inactive.
    std::span<const T> grad() const;
};

/// Append-only tape. Nodes are recorded in execution order, so reverse append
/// order is a valid reverse topological order.
template <typename T>
class Graph {
   public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Constant input; never receives gradient.
    Var<T> input(Tensor<T> value);
    /// Graph-owned leaf that receives a gradient (used by gradient checks).
    Var<T> variable(Tensor<T> value);
    /// Leaf bound to a parameter; backward accumulates into param.value.grad().
    Var<T> param(Param<T>& param);

    /// Records an op result. `fn` receives the graph and the new node id and
    /// must add the node's adjoint into each active parent's adjoint.
    Var<T> record(std::string_view op, Tensor<T> value, std::vector<std::uint32_t> parents,
                  BackwardFn fn);

    /// Reverse sweep from a scalar loss. Node adjoints are reset first;
    /// parameter gradients accumulate across calls until zeroed. Only leaves
    /// whose role is in `mask` (graph-owned variables always) are reached.
    void backward(Var<T> loss, RoleMask mask = RoleMask::all());

    const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
    bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
    /// True when `id` lies on a path to a leaf selected by the running backward.
    bool active(std::uint32_t id) const { return nodes_[id].active; }
    std::vector<T>& adjoint(std::uint32_t id);
    std::span<const T> adjoint_view(std::uint32_t id) const { return nodes_[id].adjoint; }
    const std::vector<std::uint32_t>& parents(std::uint32_t id) const { return nodes_[id].parents; }

    std::size_t size() const { return nodes_.size(); }
    /// Number of node visits performed by the most recent backward.
    std::size_t last_backward_visits() const { return visits_; }

   private:
    struct Node {
        Tensor<T> value;
        std::vector<T> adjoint;
        std::vector<std::uint32_t> parents;
        BackwardFn backward;
        Param<T>* param = nullptr;
        bool needs_grad = false;
        bool is_variable = false;
        bool active = false;
    };

    Var<T> push(Node node);

    std::deque<Node> nodes_;  // stable addresses: ops hold references across record()
    std::size_t visits_ = 0;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    return graph->value(id);
}

template <typename T>
std::span<const T> Var<T>::grad() const {
    return graph->adjoint_view(id);
}

}  // namespace cdlm
