#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fedprotokd/errors.hpp"

namespace fedprotokd {

// Dense row-major array of doubles. `grad` stays empty unless the tensor is
// tracked as a trainable parameter, in which case it mirrors the data shape.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(checked_numel(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (checked_numel(shape_) != data_.size()) {
            throw ShapeError("tensor: data length does not match shape");
        }
    }

    static Tensor row(std::initializer_list<double> values) {
        std::vector<double> v(values);
        const std::size_t n = v.size();
        return Tensor({1, n}, std::move(v));
    }

    static Tensor vec(std::initializer_list<double> values) {
        std::vector<double> v(values);
        const std::size_t n = v.size();
        return Tensor({n}, std::move(v));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols) {
        return Tensor({rows, cols});
    }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        std::vector<double> flat;
        flat.reserve(r * c);
        for (const auto& row_values : rows) {
            if (row_values.size() != c) {
                throw ShapeError("tensor: ragged matrix initializer");
            }
            flat.insert(flat.end(), row_values.begin(), row_values.end());
        }
        return Tensor({r, c}, std::move(flat));
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t numel() const { return data_.size(); }
    std::size_t rank() const { return shape_.size(); }

    std::size_t rows() const { return rank() == 2 ? shape_[0] : (rank() == 1 ? 1 : 0); }
    std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 0); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
    double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    bool tracked() const { return !grad_.empty(); }

    // Allocate (or reset) the gradient buffer, marking this tensor trainable.
    void track() { grad_.assign(data_.size(), 0.0); }

    std::vector<double>& grad() {
        if (!tracked()) throw UsageError("tensor: gradient requested on untracked tensor");
        return grad_;
    }
    const std::vector<double>& grad() const {
        if (!tracked()) throw UsageError("tensor: gradient requested on untracked tensor");
        return grad_;
    }

    void zero_grad() {
        for (double& g : grad_) g = 0.0;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    std::string shape_string() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape_.size(); ++i) {
            if (i) os << "x";
            os << shape_[i];
        }
        os << "]";
        return os.str();
    }

private:
    static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t e : shape) n *= e;
        return shape.empty() ? 0 : n;
    }

    std::vector<std::size_t> shape_;
    std::vector<double> data_;
    std::vector<double> grad_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() +
                         " vs " + b.shape_string());
    }
}

}  // namespace fedprotokd
