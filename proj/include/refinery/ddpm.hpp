// Reference denoising-diffusion implementation at toy scale: linear beta
// schedule, closed-form forward marginal, epsilon-prediction training step,
// and fixed-variance ancestral sampling.
#pragma once

#include <cstddef>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/nn.hpp"
#include "refinery/rng.hpp"

namespace refinery {

struct NoiseSchedule {
    std::vector<double> betas;       // beta_1..beta_T
    std::vector<double> alphas;      // 1 - beta_t
    std::vector<double> alpha_bars;  // prod_{s<=t} alpha_s

    int steps() const { return static_cast<int>(betas.size()); }
};

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end);

// Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
// t is 1-based in [1, T]; eps must match x0's shape.
Grid q_sample(const Grid& x0, int t, const Grid& eps, const NoiseSchedule& sched);

// Sinusoidal timestep features of the given width (sin/cos pairs).
std::vector<double> timestep_features(int t, std::size_t dim);

constexpr std::size_t kTimeFeatureDim = 16;

// One epsilon-prediction training step on a batch (rows of x0): per-row
// uniform t, fresh noise, MSE on predicted noise, one AdamW step.
// The model input width must be data_dim + kTimeFeatureDim.
double ddpm_train_step(MlpModel& model, AdamW& opt, const Grid& x0_batch, RngStream& rng,
                       const NoiseSchedule& sched);

struct DdpmSampleResult {
    Grid samples;           // n x data_dim
    int network_evals = 0;  // exactly T
};

// Ancestral sampling from x_T ~ N(0, I) with sigma_t^2 = beta_t and no
// noise injected at the final step.
DdpmSampleResult ddpm_sample(const MlpModel& model, RngStream& rng, const NoiseSchedule& sched,
                             std::size_t n);

}  // namespace refinery
