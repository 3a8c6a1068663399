#include "refinery/grid.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace refinery {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                           std::multiplies<std::size_t>());
}

void require_same_shape(const Grid& a, const Grid& b, const char* op) {
    if (!a.same_shape(b)) {
        throw dim_error(std::string(op) + ": operand shapes disagree");
    }
}

// OpenBLAS may be built with its own threading; pin it once so results are
// bit-identical run to run.
struct BlasSingleThread {
    BlasSingleThread() { openblas_set_num_threads(1); }
};
const BlasSingleThread blas_single_thread_init;

}  // namespace

Grid::Grid(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_product(shape_), 0.0) {}

Grid::Grid(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_product(shape_) != data_.size()) {
        throw dim_error("Grid: shape product does not match data length");
    }
}

Grid Grid::full(std::vector<std::size_t> shape, double value) {
    Grid g(std::move(shape));
    std::fill(g.data_.begin(), g.data_.end(), value);
    return g;
}

std::size_t Grid::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw dim_error("Grid::dim: axis out of range");
    }
    return shape_[axis];
}

Grid Grid::reshaped(std::vector<std::size_t> shape) const {
    if (shape_product(shape) != data_.size()) {
        throw dim_error("Grid::reshaped: shape product does not match data length");
    }
    Grid g;
    g.shape_ = std::move(shape);
    g.data_ = data_;
    return g;
}

bool Grid::all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
}

Grid add(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "add");
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Grid sub(const Grid& a, const Grid& b) {
    require_same_shape(a, b, "sub");
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

Grid mul_scalar(const Grid& a, double s) {
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
    return out;
}

Grid clamp(const Grid& a, double lo, double hi) {
    if (lo > hi) throw input_error("clamp: lo exceeds hi");
    Grid out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::clamp(a[i], lo, hi);
    return out;
}

double sum(const Grid& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    return acc;
}

double mean(const Grid& a) {
    if (a.empty()) throw input_error("mean: empty grid");
    return sum(a) / static_cast<double>(a.size());
}

double l2_norm(const Grid& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * a[i];
    return std::sqrt(acc);
}

void axpy(double alpha, const Grid& x, Grid& y) {
    require_same_shape(x, y, "axpy");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

namespace {

Grid gemm(const Grid& a, const Grid& b, bool trans_a, bool trans_b, const char* op) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw dim_error(std::string(op) + ": operands must be 2-D");
    }
    const std::size_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::size_t k = trans_a ? a.dim(0) : a.dim(1);
    const std::size_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::size_t n = trans_b ? b.dim(0) : b.dim(1);
    if (k != kb) {
        throw dim_error(std::string(op) + ": inner dimensions disagree");
    }
    Grid c({m, n});
    if (m == 0 || n == 0) return c;
    if (k == 0) return c;
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<blasint>(m),
                static_cast<blasint>(n), static_cast<blasint>(k), 1.0, a.data(),
                static_cast<blasint>(a.dim(1)), b.data(), static_cast<blasint>(b.dim(1)),
                0.0, c.data(), static_cast<blasint>(n));
    return c;
}

}  // namespace

Grid matmul(const Grid& a, const Grid& b) { return gemm(a, b, false, false, "matmul"); }
Grid matmul_tn(const Grid& a, const Grid& b) { return gemm(a, b, true, false, "matmul_tn"); }
Grid matmul_nt(const Grid& a, const Grid& b) { return gemm(a, b, false, true, "matmul_nt"); }

}  // namespace refinery
