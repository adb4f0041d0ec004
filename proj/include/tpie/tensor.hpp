#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace tpie {

/// Raised when a caller violates an operation's preconditions (bad shapes,
/// out-of-range arguments). Runtime failures use std::runtime_error.
class ContractError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline void require(bool cond, const std::string& what) {
    if (!cond) throw ContractError(what);
}

inline void require_shape(const Shape& got, const Shape& want, const char* op) {
    if (got != want) {
        throw ContractError(std::string(op) + ": shape mismatch " + shape_str(got) + " vs " +
                            shape_str(want));
    }
}

/// Dense row-major tensor. A plain value type; the autodiff tape holds these
/// by value and never mutates a recorded one.
template <typename T>
class Tensor {
   public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (data_.size() != numel(shape_)) {
            throw ContractError("Tensor: " + std::to_string(data_.size()) +
                                " values do not fill shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> data() { return data_; }
    std::span<const T> data() const { return data_; }
    T* ptr() { return data_.data(); }
    const T* ptr() const { return data_.data(); }
    std::vector<T>& storage() { return data_; }
    const std::vector<T>& storage() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Scalar value of a one-element tensor.
    T item() const {
        require(data_.size() == 1, "Tensor::item on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    Tensor reshaped(Shape shape) const {
        require(numel(shape) == data_.size(),
                "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
        return Tensor(std::move(shape), data_);
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    T max_abs() const {
        T m{};
        for (T v : data_) m = std::max(m, std::abs(v));
        return m;
    }

    T sum() const {
        T s{};
        for (T v : data_) s += v;
        return s;
    }

    T sum_squares() const {
        T s{};
        for (T v : data_) s += v * v;
        return s;
    }

    /// Batch item `b` of a tensor whose leading axis is the batch axis.
    Tensor slice_batch(std::size_t b) const {
        require(rank() >= 1 && b < shape_[0], "slice_batch out of range");
        Shape s(shape_.begin() + 1, shape_.end());
        const std::size_t n = numel(s);
        return Tensor(s, std::vector<T>(data_.begin() + b * n, data_.begin() + (b + 1) * n));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

   private:
    Shape shape_;
    std::vector<T> data_;
};

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
    require(!items.empty(), "stack of zero tensors");
    Shape s = items.front().shape();
    std::vector<T> out;
    out.reserve(items.size() * numel(s));
    for (const auto& t : items) {
        require_shape(t.shape(), s, "stack");
        out.insert(out.end(), t.data().begin(), t.data().end());
    }
    s.insert(s.begin(), items.size());
    return Tensor<T>(std::move(s), std::move(out));
}

template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
    return stack(std::span<const Tensor<T>>(items));
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    require_shape(a.shape(), b.shape(), "max_abs_diff");
    T m{};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace tpie
