#include "refinery/metrics.hpp"

#include <cmath>
#include <limits>

#include "refinery/error.hpp"

namespace refinery {

double psnr_from_mse(double mse_value) {
    if (mse_value < 0.0) throw input_error("psnr_from_mse: mse must be >= 0");
    if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse_value);
}

double mse(const Grid& pred, const Grid& truth) {
    if (!pred.same_shape(truth)) throw dim_error("mse: shapes disagree");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

std::vector<double> per_image_mse(const Grid& pred, const Grid& truth) {
    if (!pred.same_shape(truth) || pred.rank() != 2) {
        throw dim_error("per_image_mse: expected equal-shape N x D grids");
    }
    const std::size_t n = pred.dim(0), d = pred.dim(1);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = pred[i * d + c] - truth[i * d + c];
            acc += diff * diff;
        }
        out[i] = acc / static_cast<double>(d);
    }
    return out;
}

double mean_psnr(const Grid& pred, const Grid& truth) {
    const std::vector<double> mses = per_image_mse(pred, truth);
    double acc = 0.0;
    for (double m : mses) {
        const double p = psnr_from_mse(m);
        if (std::isinf(p)) return p;
        acc += p;
    }
    return acc / static_cast<double>(mses.size());
}

double epochs_to_target(const std::vector<double>& trace, double target) {
    for (std::size_t i = 0; i < trace.size(); ++i) {
        if (trace[i] <= target) return static_cast<double>(i + 1);
    }
    return std::numeric_limits<double>::infinity();
}

}  // namespace refinery
