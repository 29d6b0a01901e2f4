#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "qrn/error.hpp"

namespace qrn {

using Shape = std::vector<int>;

inline int64_t shape_volume(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d <= 0) fail(ErrorCode::invalid_argument, "tensor dimensions must be positive");
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

// Dense n-dimensional array, row-major. Image batches are NCHW.
template <typename T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(static_cast<size_t>(shape_volume(shape_)), fill) {}
    TensorT(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != shape_volume(shape_))
            fail(ErrorCode::shape_mismatch,
                 "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
    }

    const Shape& shape() const { return shape_; }
    int dim(size_t i) const { return shape_.at(i); }
    size_t rank() const { return shape_.size(); }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& values() { return data_; }
    const std::vector<T>& values() const { return data_; }

    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    T& at4(int n, int c, int h, int w) {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& at4(int n, int c, int h, int w) const {
        return data_[((static_cast<size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    T& at2(int r, int c) { return data_[static_cast<size_t>(r) * shape_[1] + c]; }
    const T& at2(int r, int c) const { return data_[static_cast<size_t>(r) * shape_[1] + c]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (T v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void require_finite(const std::string& context) const {
        if (!all_finite()) fail(ErrorCode::diverged, "non-finite values in " + context);
    }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> out(data_.size());
        for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return TensorT<U>(shape_, std::move(out));
    }

    bool same_shape(const TensorT& other) const { return shape_ == other.shape_; }

    friend bool operator==(const TensorT& a, const TensorT& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorF64 = TensorT<double>;

}  // namespace qrn
