#include "refinery/ddpm.hpp"

#include <cmath>

#include "refinery/error.hpp"

namespace refinery {

NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw input_error("make_linear_schedule: need T >= 1");
    if (!(beta_start > 0.0) || beta_start > beta_end || !(beta_end < 1.0)) {
        throw input_error("make_linear_schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.betas.resize(static_cast<std::size_t>(steps));
    for (int t = 0; t < steps; ++t) {
        s.betas[static_cast<std::size_t>(t)] =
            steps == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                             static_cast<double>(steps - 1);
    }
    s.alphas.resize(s.betas.size());
    s.alpha_bars.resize(s.betas.size());
    double prod = 1.0;
    for (std::size_t t = 0; t < s.betas.size(); ++t) {
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

Grid q_sample(const Grid& x0, int t, const Grid& eps, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps()) throw input_error("q_sample: t out of range");
    if (!x0.same_shape(eps)) throw dim_error("q_sample: eps shape does not match x0");
    const double abar = sched.alpha_bars[static_cast<std::size_t>(t - 1)];
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    Grid out(x0.shape());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

std::vector<double> timestep_features(int t, std::size_t dim) {
    std::vector<double> f(dim);
    const std::size_t half = dim / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        f[2 * i] = std::sin(static_cast<double>(t) * freq);
        f[2 * i + 1] = std::cos(static_cast<double>(t) * freq);
    }
    return f;
}

double ddpm_train_step(MlpModel& model, AdamW& opt, const Grid& x0_batch, RngStream& rng,
                       const NoiseSchedule& sched) {
    if (x0_batch.rank() != 2) throw dim_error("ddpm_train_step: expected a B x D batch");
    const std::size_t rows = x0_batch.dim(0), data_dim = x0_batch.dim(1);
    if (model.in_width() != data_dim + kTimeFeatureDim || model.out_width() != data_dim) {
        throw dim_error("ddpm_train_step: model widths do not match data dim + time features");
    }

    Grid inputs({rows, data_dim + kTimeFeatureDim});
    Grid eps({rows, data_dim});
    for (std::size_t r = 0; r < rows; ++r) {
        const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
        const double abar = sched.alpha_bars[static_cast<std::size_t>(t - 1)];
        const double a = std::sqrt(abar), b = std::sqrt(1.0 - abar);
        double* in_row = inputs.data() + r * (data_dim + kTimeFeatureDim);
        for (std::size_t c = 0; c < data_dim; ++c) {
            const double e = rng.normal();
            eps[r * data_dim + c] = e;
            in_row[c] = a * x0_batch[r * data_dim + c] + b * e;
        }
        const std::vector<double> tf = timestep_features(t, kTimeFeatureDim);
        for (std::size_t c = 0; c < kTimeFeatureDim; ++c) in_row[data_dim + c] = tf[c];
    }

    auto [pred, cache] = mlp_forward(model, inputs);
    auto [loss, d_pred] = loss_mse(pred, eps);
    const GradReport grads = mlp_backward(model, cache, d_pred, false);
    auto params = model.params();
    const auto grad_ptrs = grads.params();
    opt.step(std::span<Grid* const>(params), std::span<const Grid* const>(grad_ptrs));
    return loss;
}

DdpmSampleResult ddpm_sample(const MlpModel& model, RngStream& rng, const NoiseSchedule& sched,
                             std::size_t n) {
    const std::size_t data_dim = model.out_width();
    if (model.in_width() != data_dim + kTimeFeatureDim) {
        throw dim_error("ddpm_sample: model widths do not match data dim + time features");
    }
    DdpmSampleResult res;
    res.samples = randn(rng, {n, data_dim});

    Grid inputs({n, data_dim + kTimeFeatureDim});
    for (int t = sched.steps(); t >= 1; --t) {
        const std::size_t ti = static_cast<std::size_t>(t - 1);
        const double beta = sched.betas[ti];
        const double alpha = sched.alphas[ti];
        const double abar = sched.alpha_bars[ti];
        const std::vector<double> tf = timestep_features(t, kTimeFeatureDim);
        for (std::size_t r = 0; r < n; ++r) {
            double* row = inputs.data() + r * (data_dim + kTimeFeatureDim);
            for (std::size_t c = 0; c < data_dim; ++c) row[c] = res.samples[r * data_dim + c];
            for (std::size_t c = 0; c < kTimeFeatureDim; ++c) row[data_dim + c] = tf[c];
        }
        const Grid eps_hat = mlp_forward(model, inputs).first;
        ++res.network_evals;

        const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
        const double eps_coef = beta / std::sqrt(1.0 - abar);
        const double sigma = std::sqrt(beta);
        for (std::size_t i = 0; i < res.samples.size(); ++i) {
            double mu = inv_sqrt_alpha * (res.samples[i] - eps_coef * eps_hat[i]);
            res.samples[i] = t > 1 ? mu + sigma * rng.normal() : mu;
        }
    }
    return res;
}

}  // namespace refinery
