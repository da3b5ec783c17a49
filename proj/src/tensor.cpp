#include "cdlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cdlm {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Dimension: return "dimension";
        case ErrorKind::Configuration: return "configuration";
        case ErrorKind::Domain: return "domain";
        case ErrorKind::Usage: return "usage";
        case ErrorKind::State: return "state";
        case ErrorKind::Format: return "format";
        case ErrorKind::Io: return "io";
        case ErrorKind::NonFinite: return "non-finite";
    }
    return "unknown";
}

const char* to_string(Role role) {
    switch (role) {
        case Role::Encoder: return "encoder";
        case Role::Decoder: return "decoder";
        case Role::Discriminator: return "discriminator";
        case Role::Auxiliary: return "auxiliary";
    }
    return "unknown";
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void check_extents(const Shape& shape) {
    for (auto d : shape) {
        if (d == 0) fail(ErrorKind::Dimension, "zero extent in shape " + shape_str(shape));
    }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    check_extents(shape_);
    data_.assign(shape_size(shape_), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents(shape_);
    if (data_.size() != shape_size(shape_)) {
        fail(ErrorKind::Dimension, "shape " + shape_str(shape_) + " needs " +
                                       std::to_string(shape_size(shape_)) + " elements, got " +
                                       std::to_string(data_.size()));
    }
}

template <typename T>
std::span<T> Tensor<T>::grad() {
    if (grad_.size() != data_.size()) grad_.assign(data_.size(), T(0));
    return grad_;
}

template <typename T>
void Tensor<T>::zero_grad() {
    grad_.assign(data_.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
        fail(ErrorKind::Dimension,
             "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
}

template <typename T>
bool Tensor<T>::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
Param<T>& ParamSet<T>::add(std::string name, Role role, Tensor<T> value) {
    if (find(name)) fail(ErrorKind::Usage, "duplicate parameter name '" + name + "'");
    value.set_requires_grad(true);
    params_.push_back(Param<T>{std::move(name), role, std::move(value)});
    return params_.back();
}

template <typename T>
Param<T>* ParamSet<T>::find(const std::string& name) {
    for (auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

template <typename T>
const Param<T>* ParamSet<T>::find(const std::string& name) const {
    for (const auto& p : params_) {
        if (p.name == name) return &p;
    }
    return nullptr;
}

template <typename T>
Param<T>& ParamSet<T>::at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    fail(ErrorKind::Usage, "no parameter named '" + name + "'");
}

template <typename T>
const Param<T>& ParamSet<T>::at(const std::string& name) const {
    if (const auto* p = find(name)) return *p;
    fail(ErrorKind::Usage, "no parameter named '" + name + "'");
}

template <typename T>
void ParamSet<T>::zero_grad() {
    for (auto& p : params_) p.value.zero_grad();
}

template <typename T>
void ParamSet<T>::zero_grad(RoleMask mask) {
    for (auto& p : params_) {
        if (mask.contains(p.role)) p.value.zero_grad();
    }
}

template <typename T>
std::size_t ParamSet<T>::count(Role role) const {
    return static_cast<std::size_t>(
        std::count_if(params_.begin(), params_.end(), [&](const auto& p) { return p.role == role; }));
}

template class Tensor<float>;
template class Tensor<double>;
template class ParamSet<float>;
template class ParamSet<double>;

}  // namespace cdlm
