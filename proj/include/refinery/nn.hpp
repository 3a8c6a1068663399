// 2-layer MLP (GELU, pre-output LayerNorm) with hand-derived gradients,
// the three loss heads used by the experiments, and AdamW.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/rng.hpp"

namespace refinery {

// Exact GELU x * Phi(x) with Phi the standard normal CDF (erf form).
Grid gelu(const Grid& x);
Grid gelu_grad(const Grid& x);

// Per-row normalization to zero mean / unit variance (epsilon 1e-5), then
// affine. h is [B x F]; gamma/beta are length-F.
Grid layernorm(const Grid& h, const Grid& gamma, const Grid& beta);

struct LayerNormGrads {
    Grid d_input;
    Grid d_gamma;
    Grid d_beta;
};
LayerNormGrads layernorm_backward(const Grid& h, const Grid& gamma, const Grid& d_out);

struct MlpConfig {
    std::size_t in = 0;
    std::size_t hidden = 512;
    std::size_t out = 0;
};

// y = W2 * layernorm(gelu(W1 * x + b1)) + b2
struct MlpModel {
    Grid w1;        // in x hidden
    Grid b1;        // hidden
    Grid ln_gamma;  // hidden
    Grid ln_beta;   // hidden
    Grid w2;        // hidden x out
    Grid b2;        // out

    // He-scaled normal init for the weight matrices, zeros for biases,
    // ones/zeros for gamma/beta, drawn from rng in declaration order.
    static MlpModel init(const MlpConfig& cfg, RngStream& rng);

    std::size_t in_width() const { return w1.dim(0); }
    std::size_t hidden_width() const { return w1.dim(1); }
    std::size_t out_width() const { return w2.dim(1); }
    std::size_t param_count() const;

    std::array<Grid*, 6> params();
    std::array<const Grid*, 6> params() const;
};

// Intermediates retained by mlp_forward for the matching backward call.
struct MlpCache {
    Grid x;        // input batch
    Grid h;        // pre-activation W1*x + b1
    Grid phi;      // Phi(h), cached so backward needs no second erf pass
    Grid a;        // gelu(h)
    Grid xhat;     // normalized hidden
    Grid inv_std;  // per-row 1/sqrt(var + eps)
    bool valid = false;
};

struct GradReport {
    Grid w1, b1, ln_gamma, ln_beta, w2, b2;
    Grid input;  // empty unless requested
    double global_grad_norm = 0.0;  // l2 norm over the six parameter grads

    std::array<const Grid*, 6> params() const;
};

std::pair<Grid, MlpCache> mlp_forward(const MlpModel& model, const Grid& x);

// Consumes the cache (a second call on the same cache is a state error).
// Set with_input_grad=false to skip the dL/dx product when it is unused.
GradReport mlp_backward(const MlpModel& model, MlpCache& cache, const Grid& d_y,
                        bool with_input_grad = true);

// ---- loss heads: each returns (scalar loss, dL/d first argument) ----

// Mean over all elements of squared error.
std::pair<double, Grid> loss_mse(const Grid& y, const Grid& target);

// Mean over rows of -log softmax probability of the true label.
std::pair<double, Grid> loss_softmax_ce(const Grid& logits, const std::vector<std::int32_t>& labels);

// Mean binary cross-entropy over all bit positions, log-sum-exp stabilized.
std::pair<double, Grid> loss_bce_bits(const Grid& logits, const Grid& bits);

// ---- optimizer ----

struct AdamWConfig {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Decoupled weight decay Adam with bias correction, over an ordered
// parameter list (moment slots mirror the list passed at construction).
class AdamW {
public:
    AdamW(std::span<const Grid* const> params, AdamWConfig cfg = {});

    void step(std::span<Grid* const> params, std::span<const Grid* const> grads);

    long step_count() const { return step_count_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    long step_count_ = 0;
    std::vector<Grid> m_;
    std::vector<Grid> v_;
};

// Population variance of recorded per-step global gradient norms.
double grad_norm_variance(const std::vector<double>& norm_trace);

}  // namespace refinery
