#pragma once

#include <algorithm>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "nisqa/common.hpp"

namespace nisqa {

// Dense row-major tensor. Scalar type is a template parameter: tests and
// oracles run in double, release inference and training run in float.
template <typename T>
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> d) : dims(std::move(d)) {
        data.assign(numel_of(dims), T(0));
    }
    Tensor(std::vector<std::size_t> d, std::vector<T> v) : dims(std::move(d)), data(std::move(v)) {
        if (data.size() != numel_of(dims)) throw InternalError("tensor: data size does not match dims");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& d) {
        std::size_t n = 1;
        for (auto x : d) n *= x;
        return n;
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return dims.size(); }
    std::size_t dim(std::size_t i) const { return dims[i]; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    // 2-D accessors
    T& at(std::size_t i, std::size_t j) { return data[i * dims[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return data[i * dims[1] + j]; }

    bool same_shape(const Tensor& o) const { return dims == o.dims; }

    Tensor reshaped(std::vector<std::size_t> d) const {
        if (numel_of(d) != numel()) throw InternalError("tensor: reshape numel mismatch");
        return Tensor(std::move(d), data);
    }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.dims = dims;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(double(v))) return false;
        return true;
    }
};

}  // namespace nisqa
