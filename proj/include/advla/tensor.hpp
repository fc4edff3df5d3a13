#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "advla/common.hpp"

namespace advla {

/// Dense row-major n-dimensional array. Plain value type: copyable,
/// comparable, no graph state. Scalar is double for verification work and
/// float for speed runs.
template <typename S>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), S(0)) {
        check_shape(shape_);
    }

    Tensor(std::vector<std::size_t> shape, std::vector<S> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape(shape_);
        if (count(shape_) != data_.size())
            throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_string(shape_));
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, S v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(S v) { return Tensor({1}, {v}); }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }

    const std::vector<S>& data() const { return data_; }
    std::vector<S>& data() { return data_; }
    const S* raw() const { return data_.data(); }
    S* raw() { return data_.data(); }

    S operator[](std::size_t i) const { return data_[i]; }
    S& operator[](std::size_t i) { return data_[i]; }

    /// 2-D accessors; only valid for rank-2 tensors.
    S at2(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    S& at2(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }

    bool requires_grad() const { return requires_grad_; }
    Tensor& set_requires_grad(bool v) {
        requires_grad_ = v;
        return *this;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    S max_abs() const {
        S m = 0;
        for (S v : data_) m = std::max(m, static_cast<S>(std::abs(v)));
        return m;
    }

    S min_value() const {
        S m = data_.empty() ? S(0) : data_[0];
        for (S v : data_) m = std::min(m, v);
        return m;
    }

    S max_value() const {
        S m = data_.empty() ? S(0) : data_[0];
        for (S v : data_) m = std::max(m, v);
        return m;
    }

    S sum() const { return std::accumulate(data_.begin(), data_.end(), S(0)); }

    /// Elementwise in-place clamp.
    void clamp(S lo, S hi) {
        for (S& v : data_) v = std::min(hi, std::max(lo, v));
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    std::string shape_string() const { return shape_string(shape_); }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

private:
    static void check_shape(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw ValidationError("tensor shape must have at least one dimension");
        for (std::size_t d : shape)
            if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_string(shape));
    }

    std::vector<std::size_t> shape_;
    std::vector<S> data_;
    bool requires_grad_ = false;
};

/// sign with sign(0) = 0.
template <typename S>
inline S sign_of(S v) {
    return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0));
}

template <typename S>
inline S clamp_value(S v, S lo, S hi) {
    return std::min(hi, std::max(lo, v));
}

}  // namespace advla
