// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cobo::ad {

/// Dense row-major tensor of 64-bit reals. Rank 0 (empty shape) is a scalar.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(numel_of(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (numel_of(shape_) != data_.size()) {
            throw std::invalid_argument("Tensor: shape/data size mismatch (" +
                                        std::to_string(numel_of(shape_)) + " vs " +
                                        std::to_string(data_.size()) + ")");
        }
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        for (auto& x : t.data_) x = v;
        return t;
    }

    /// Identity matrix of order n.
    static Tensor eye(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const { return data_.size(); }

    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    std::size_t cols() const {
        if (shape_.size() < 2) return shape_.empty() ? 1 : 1;
        return shape_[1];
    }

    bool is_scalar() const { return data_.size() == 1 && shape_.empty(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double value() const {
        if (data_.size() != 1) throw std::logic_error("Tensor::value: not a scalar");
        return data_[0];
    }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }

    bool all_finite() const {
        for (double x : data_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    static std::size_t numel_of(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               [](std::size_t a, std::size_t b) { return a * b; });
    }

    static std::string shape_str(const std::vector<std::size_t>& shape) {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

}  // namespace cobo::ad
