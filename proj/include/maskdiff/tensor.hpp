#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace maskdiff {

namespace detail {

// vector storage that default-initializes (skips zeroing) for trivial types
template <typename T>
class DefaultInitAllocator : public std::allocator<T> {
public:
    using std::allocator<T>::allocator;
    template <typename U>
    struct rebind {
        using other = DefaultInitAllocator<U>;
    };
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

// Dense row-major tensor with dynamic rank. All storage is contiguous;
// rank-3 tensors are (channels, height, width), rank-4 are network
// activations in channel-major layout (see nn.hpp). The plain constructor
// zero-fills; uninit() skips the fill for buffers that are written in full.
template <typename S>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
        data_.resize(static_cast<size_t>(compute_numel(shape_)));
        std::fill(data_.begin(), data_.end(), S(0));
    }
    Tensor(std::vector<int> shape, S fill) : shape_(std::move(shape)) {
        data_.resize(static_cast<size_t>(compute_numel(shape_)));
        std::fill(data_.begin(), data_.end(), fill);
    }

    static Tensor uninit(std::vector<int> shape) {
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_.resize(static_cast<size_t>(compute_numel(t.shape_)));
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    S& at2(int a, int b) {
        return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)];
    }
    const S& at2(int a, int b) const {
        return data_[static_cast<size_t>(static_cast<int64_t>(a) * shape_[1] + b)];
    }
    S& at3(int a, int b, int c) {
        return data_[static_cast<size_t>((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + c)];
    }
    const S& at3(int a, int b, int c) const {
        return data_[static_cast<size_t>((static_cast<int64_t>(a) * shape_[1] + b) * shape_[2] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const S& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    void fill(S v) { std::fill(data_.begin(), data_.end(), v); }

    void check_same_shape(const Tensor& o, const char* what) const {
        if (!same_shape(o))
            throw std::invalid_argument(std::string(what) + ": shape mismatch (" +
                                        shape_str(shape_) + " vs " + shape_str(o.shape_) + ")");
    }

    static std::string shape_str(const std::vector<int>& s) {
        std::string r = "[";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) r += ",";
            r += std::to_string(s[i]);
        }
        return r + "]";
    }

private:
    static int64_t compute_numel(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
            n *= d;
        }
        return n;
    }

    std::vector<int> shape_;
    std::vector<S, detail::DefaultInitAllocator<S>> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorU8 = Tensor<uint8_t>;

template <typename A, typename B>
Tensor<A> cast_tensor(const Tensor<B>& t) {
    Tensor<A> out(t.shape());
    for (int64_t i = 0; i < t.numel(); ++i) out[i] = static_cast<A>(t[i]);
    return out;
}

}  // namespace maskdiff
