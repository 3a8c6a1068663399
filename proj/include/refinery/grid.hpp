// Dense row-major 64-bit float array: the value type for images, latents,
// weights and gradients everywhere in this project.
#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

#include "refinery/error.hpp"

namespace refinery {

class Grid {
public:
    Grid() = default;

    // Zero-filled grid of the given shape.
    explicit Grid(std::vector<std::size_t> shape);

    // Takes ownership of data; product(shape) must equal data.size().
    Grid(std::vector<std::size_t> shape, std::vector<double> data);

    static Grid full(std::vector<std::size_t> shape, double value);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // Row-major indexers for the common ranks.
    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    // Same data, new shape; product must match.
    Grid reshaped(std::vector<std::size_t> shape) const;

    bool same_shape(const Grid& other) const { return shape_ == other.shape_; }

    // True when every element is finite.
    bool all_finite() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// ---- elementwise suite ----
Grid add(const Grid& a, const Grid& b);
Grid sub(const Grid& a, const Grid& b);
Grid mul_scalar(const Grid& a, double s);
Grid clamp(const Grid& a, double lo, double hi);
double sum(const Grid& a);
double mean(const Grid& a);
double l2_norm(const Grid& a);

// In-place y += alpha * x (shapes must agree).
void axpy(double alpha, const Grid& x, Grid& y);

// ---- matrix products (2-D grids) ----
Grid matmul(const Grid& a, const Grid& b);     // [m x k] * [k x n]
Grid matmul_tn(const Grid& a, const Grid& b);  // transpose(a) * b: [k x m]^T * [k x n]
Grid matmul_nt(const Grid& a, const Grid& b);  // a * transpose(b): [m x k] * [n x k]^T

}  // namespace refinery
