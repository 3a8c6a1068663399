// Experiment metrics: PSNR with a peak of 1.0, high-frequency PSNR on the
// finest residual band, and epochs-to-target over a test-MSE trace.
#pragma once

#include <vector>

#include "refinery/grid.hpp"

namespace refinery {

// 10 * log10(1 / mse); mse == 0 reports +infinity.
double psnr_from_mse(double mse);

// Per-image PSNR averaged over the set. Both grids are N x D (rows are
// images); an exact row contributes the +infinity sentinel.
double mean_psnr(const Grid& pred, const Grid& truth);

// Mean squared error over all elements of two equal-shape grids.
double mse(const Grid& pred, const Grid& truth);

// Per-image MSE values (rows of N x D grids).
std::vector<double> per_image_mse(const Grid& pred, const Grid& truth);

// First 1-based epoch whose trace value is <= target; +infinity if never.
double epochs_to_target(const std::vector<double>& trace, double target);

}  // namespace refinery
