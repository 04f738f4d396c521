#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fcil/errors.hpp"

namespace fcil {

// Dense row-major array of doubles. Universal carrier for samples, feature
// vectors, parameters and gradients. Rank 1 and 2 cover everything here.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(product(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (product(shape_) != data_.size()) {
            throw DimensionError("tensor: shape product " + std::to_string(product(shape_)) +
                                 " does not match data length " + std::to_string(data_.size()));
        }
    }

    static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

    static Tensor matrix(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    static Tensor vector(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor row_matrix(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({1, n}, std::move(values));
    }

    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    const std::vector<std::size_t>& shape() const { return shape_; }

    std::size_t rows() const {
        require_rank(2, "rows()");
        return shape_[0];
    }

    std::size_t cols() const {
        require_rank(2, "cols()");
        return shape_[1];
    }

    double& operator()(std::size_t i) { return data_[i]; }
    double operator()(std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (double v : data_) {
            if (!std::isfinite(v)) {
                return false;
            }
        }
        return true;
    }

    void require_finite(const std::string& what) const {
        if (!all_finite()) {
            throw NumericError(what + ": non-finite value encountered");
        }
    }

    void require_rank(std::size_t r, const std::string& what) const {
        if (shape_.size() != r) {
            throw DimensionError(what + ": expected rank " + std::to_string(r) + ", got rank " +
                                 std::to_string(shape_.size()));
        }
    }

    // Copy row i of a rank-2 tensor into a rank-1 tensor.
    Tensor row(std::size_t i) const {
        require_rank(2, "row()");
        Tensor out({shape_[1]});
        for (std::size_t j = 0; j < shape_[1]; ++j) {
            out(j) = (*this)(i, j);
        }
        return out;
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    static std::size_t product(const std::vector<std::size_t>& shape) {
        std::size_t p = 1;
        for (std::size_t s : shape) {
            p *= s;
        }
        return shape.empty() ? 0 : p;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline std::string shape_string(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.shape().size(); ++i) {
        if (i > 0) {
            s += ", ";
        }
        s += std::to_string(t.shape()[i]);
    }
    s += ")";
    return s;
}

}  // namespace fcil
