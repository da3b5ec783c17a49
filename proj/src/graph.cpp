#include "cdlm/graph.hpp"

#include <algorithm>

namespace cdlm {

template <typename T>
Var<T> Graph<T>::push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Graph<T>::input(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = true;
    n.is_variable = true;
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::param(Param<T>& param) {
    Node n;
    n.value = Tensor<T>(param.value.shape(), param.value.storage());
    n.param = &param;
    n.needs_grad = true;
    return push(std::move(n));
}

template <typename T>
Var<T> Graph<T>::record(std::string_view op, Tensor<T> value, std::vector<std::uint32_t> parents,
                        BackwardFn fn) {
    if (!value.all_finite()) {
        fail(ErrorKind::NonFinite,
             "non-finite value produced by " + std::string(op) + " " + shape_str(value.shape()));
    }
    Node n;
    n.value = std::move(value);
    n.needs_grad = std::any_of(parents.begin(), parents.end(),
                               [&](std::uint32_t p) { return nodes_[p].needs_grad; });
    n.parents = std::move(parents);
    if (n.needs_grad) n.backward = std::move(fn);
    return push(std::move(n));
}

template <typename T>
std::vector<T>& Graph<T>::adjoint(std::uint32_t id) {
    auto& n = nodes_[id];
    if (n.adjoint.size() != n.value.size()) n.adjoint.assign(n.value.size(), T(0));
    return n.adjoint;
}

template <typename T>
void Graph<T>::backward(Var<T> loss, RoleMask mask) {
    if (loss.graph != this) fail(ErrorKind::Usage, "loss belongs to a different graph");
    if (nodes_[loss.id].value.size() != 1) {
        fail(ErrorKind::Usage,
             "backward needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
    }

    // Forward sweep: a node is active when it reaches a selected leaf.
    for (std::uint32_t i = 0; i <= loss.id; ++i) {
        auto& n = nodes_[i];
        n.adjoint.clear();
        if (n.param) {
            n.active = mask.contains(n.param->role);
        } else if (n.is_variable) {
            n.active = true;
        } else {
            n.active = n.needs_grad && std::any_of(n.parents.begin(), n.parents.end(),
                                                   [&](std::uint32_t p) { return nodes_[p].active; });
        }
    }

    visits_ = 0;
    if (nodes_[loss.id].active) {
        adjoint(loss.id)[0] = T(1);
        for (std::uint32_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            ++visits_;
            if (!n.active || n.adjoint.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
    }

    for (std::uint32_t i = 0; i <= loss.id; ++i) {
        auto& n = nodes_[i];
        if (n.is_variable) {
            adjoint(i);
        } else if (n.param && n.active) {
            auto g = n.param->value.grad();
            if (!n.adjoint.empty()) {
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += n.adjoint[k];
            }
        }
    }
}

template class Graph<float>;
template class Graph<double>;

}  // namespace cdlm
