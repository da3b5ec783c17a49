#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <deque>
#include <vector>

#include "cdlm/error.hpp"

namespace cdlm {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. The gradient buffer is materialized lazily and
/// always mirrors the data shape.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0));
    Tensor(Shape shape, std::vector<T> data);

    const Shape& shape() const { return shape_; }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool on) { requires_grad_ = on; }

    bool has_grad() const { return !grad_.empty(); }
    std::span<T> grad();
    std::span<const T> grad() const { return grad_; }
    void zero_grad();

    /// Same data, new shape; throws when element counts differ.
    Tensor reshaped(Shape shape) const;

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool all_finite() const;

   private:
    Shape shape_;
    std::vector<T> data_;
    std::vector<T> grad_;
    bool requires_grad_ = false;
};

/// Parameter partitions. Each optimizer step touches exactly one of them.
enum class Role : std::uint8_t {
    Encoder = 1,        // variational parameters
    Decoder = 2,        // generation parameters
    Discriminator = 4,  // domain discriminator
    Auxiliary = 8,      // evaluation-only networks (classifiers)
};

const char* to_string(Role role);

struct RoleMask {
    std::uint8_t bits = 0xff;

    static constexpr RoleMask all() { return {0xff}; }
    static constexpr RoleMask only(Role r) { return {static_cast<std::uint8_t>(r)}; }
    constexpr RoleMask operator|(Role r) const {
        return {static_cast<std::uint8_t>(bits | static_cast<std::uint8_t>(r))};
    }
    constexpr bool contains(Role r) const { return (bits & static_cast<std::uint8_t>(r)) != 0; }
};

template <typename T>
struct Param {
    std::string name;
    Role role;
    Tensor<T> value;
};

/// Named leaf tensors partitioned by role. Addresses are stable once the set
/// is frozen; graphs hold pointers into it.
template <typename T>
class ParamSet {
   public:
    Param<T>& add(std::string name, Role role, Tensor<T> value);

    Param<T>& at(const std::string& name);
    const Param<T>& at(const std::string& name) const;
    Param<T>* find(const std::string& name);
    const Param<T>* find(const std::string& name) const;

    std::size_t size() const { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    void zero_grad(RoleMask mask);
    std::size_t count(Role role) const;

    template <typename U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& p : params_) out.add(p.name, p.role, p.value.template cast<U>());
        return out;
    }

   private:
    std::deque<Param<T>> params_;
};

}  // namespace cdlm
