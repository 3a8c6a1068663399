#include "refinery/nn.hpp"

#include <cmath>
#include <numbers>

#include "refinery/error.hpp"

namespace refinery {

namespace {

constexpr double kLnEps = 1e-5;
const double kInvSqrt2 = 1.0 / std::numbers::sqrt2;
const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)); }
double normal_pdf(double x) { return kInvSqrt2Pi * std::exp(-0.5 * x * x); }

void require_2d(const Grid& g, const char* op) {
    if (g.rank() != 2) throw dim_error(std::string(op) + ": expected a 2-D grid");
}

}  // namespace

Grid gelu(const Grid& x) {
    Grid out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * normal_cdf(x[i]);
    return out;
}

Grid gelu_grad(const Grid& x) {
    Grid out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = normal_cdf(x[i]) + x[i] * normal_pdf(x[i]);
    }
    return out;
}

Grid layernorm(const Grid& h, const Grid& gamma, const Grid& beta) {
    require_2d(h, "layernorm");
    const std::size_t rows = h.dim(0), cols = h.dim(1);
    if (gamma.size() != cols || beta.size() != cols) {
        throw dim_error("layernorm: gamma/beta length does not match feature axis");
    }
    Grid out({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = h.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += row[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = row[c] - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        double* out_row = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            out_row[c] = gamma[c] * (row[c] - mu) * inv_std + beta[c];
        }
    }
    return out;
}

LayerNormGrads layernorm_backward(const Grid& h, const Grid& gamma, const Grid& d_out) {
    require_2d(h, "layernorm_backward");
    if (!h.same_shape(d_out)) throw dim_error("layernorm_backward: shapes disagree");
    const std::size_t rows = h.dim(0), cols = h.dim(1);
    LayerNormGrads g{Grid({rows, cols}), Grid({cols}), Grid({cols})};
    const double inv_cols = 1.0 / static_cast<double>(cols);
    std::vector<double> xhat(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = h.data() + r * cols;
        const double* do_row = d_out.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += row[c];
        mu *= inv_cols;
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = row[c] - mu;
            var += d * d;
        }
        var *= inv_cols;
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);

        // dxhat = gamma .* dout; dh = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat .* xhat))
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            xhat[c] = (row[c] - mu) * inv_std;
            const double dxhat = gamma[c] * do_row[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[c];
            g.d_gamma[c] += do_row[c] * xhat[c];
            g.d_beta[c] += do_row[c];
        }
        mean_dxhat *= inv_cols;
        mean_dxhat_xhat *= inv_cols;
        double* dh_row = g.d_input.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            const double dxhat = gamma[c] * do_row[c];
            dh_row[c] = inv_std * (dxhat - mean_dxhat - xhat[c] * mean_dxhat_xhat);
        }
    }
    return g;
}

MlpModel MlpModel::init(const MlpConfig& cfg, RngStream& rng) {
    if (cfg.in == 0 || cfg.hidden == 0 || cfg.out == 0) {
        throw input_error("MlpModel::init: all widths must be positive");
    }
    MlpModel m;
    m.w1 = randn(rng, {cfg.in, cfg.hidden});
    const double s1 = std::sqrt(2.0 / static_cast<double>(cfg.in));
    for (std::size_t i = 0; i < m.w1.size(); ++i) m.w1[i] *= s1;
    m.b1 = Grid({cfg.hidden});
    m.ln_gamma = Grid::full({cfg.hidden}, 1.0);
    m.ln_beta = Grid({cfg.hidden});
    m.w2 = randn(rng, {cfg.hidden, cfg.out});
    const double s2 = std::sqrt(2.0 / static_cast<double>(cfg.hidden));
    for (std::size_t i = 0; i < m.w2.size(); ++i) m.w2[i] *= s2;
    m.b2 = Grid({cfg.out});
    return m;
}

std::size_t MlpModel::param_count() const {
    return w1.size() + b1.size() + ln_gamma.size() + ln_beta.size() + w2.size() + b2.size();
}

std::array<Grid*, 6> MlpModel::params() {
    return {&w1, &b1, &ln_gamma, &ln_beta, &w2, &b2};
}

std::array<const Grid*, 6> MlpModel::params() const {
    return {&w1, &b1, &ln_gamma, &ln_beta, &w2, &b2};
}

std::array<const Grid*, 6> GradReport::params() const {
    return {&w1, &b1, &ln_gamma, &ln_beta, &w2, &b2};
}

std::pair<Grid, MlpCache> mlp_forward(const MlpModel& model, const Grid& x) {
    require_2d(x, "mlp_forward");
    if (x.dim(1) != model.in_width()) {
        throw dim_error("mlp_forward: input width does not match W1");
    }
    const std::size_t rows = x.dim(0);
    const std::size_t hidden = model.hidden_width();
    const std::size_t out_w = model.out_width();

    MlpCache cache;
    cache.x = x;
    cache.h = matmul(x, model.w1);
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = cache.h.data() + r * hidden;
        for (std::size_t c = 0; c < hidden; ++c) row[c] += model.b1[c];
    }

    cache.phi = Grid({rows, hidden});
    cache.a = Grid({rows, hidden});
    for (std::size_t i = 0; i < cache.h.size(); ++i) {
        cache.phi[i] = normal_cdf(cache.h[i]);
        cache.a[i] = cache.h[i] * cache.phi[i];
    }

    // LayerNorm, caching xhat and 1/std for backward.
    cache.xhat = Grid({rows, hidden});
    cache.inv_std = Grid({rows});
    const double inv_cols = 1.0 / static_cast<double>(hidden);
    Grid n({rows, hidden});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = cache.a.data() + r * hidden;
        double mu = 0.0;
        for (std::size_t c = 0; c < hidden; ++c) mu += row[c];
        mu *= inv_cols;
        double var = 0.0;
        for (std::size_t c = 0; c < hidden; ++c) {
            const double d = row[c] - mu;
            var += d * d;
        }
        var *= inv_cols;
        const double inv_std = 1.0 / std::sqrt(var + kLnEps);
        cache.inv_std[r] = inv_std;
        double* xhat_row = cache.xhat.data() + r * hidden;
        double* n_row = n.data() + r * hidden;
        for (std::size_t c = 0; c < hidden; ++c) {
            xhat_row[c] = (row[c] - mu) * inv_std;
            n_row[c] = model.ln_gamma[c] * xhat_row[c] + model.ln_beta[c];
        }
    }

    Grid y = matmul(n, model.w2);
    for (std::size_t r = 0; r < rows; ++r) {
        double* row = y.data() + r * out_w;
        for (std::size_t c = 0; c < out_w; ++c) row[c] += model.b2[c];
    }
    cache.valid = true;
    return {std::move(y), std::move(cache)};
}

GradReport mlp_backward(const MlpModel& model, MlpCache& cache, const Grid& d_y,
                        bool with_input_grad) {
    if (!cache.valid) {
        throw state_error("mlp_backward: cache already consumed or never filled");
    }
    cache.valid = false;
    require_2d(d_y, "mlp_backward");
    const std::size_t rows = cache.x.dim(0);
    const std::size_t hidden = model.hidden_width();
    const std::size_t out_w = model.out_width();
    if (d_y.dim(0) != rows || d_y.dim(1) != out_w) {
        throw dim_error("mlp_backward: dL/dy shape does not match forward output");
    }

    GradReport g;

    // Rebuild n from cached xhat (cheaper than caching it separately).
    Grid n({rows, hidden});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xhat_row = cache.xhat.data() + r * hidden;
        double* n_row = n.data() + r * hidden;
        for (std::size_t c = 0; c < hidden; ++c) {
            n_row[c] = model.ln_gamma[c] * xhat_row[c] + model.ln_beta[c];
        }
    }

    g.w2 = matmul_tn(n, d_y);
    g.b2 = Grid({out_w});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = d_y.data() + r * out_w;
        for (std::size_t c = 0; c < out_w; ++c) g.b2[c] += row[c];
    }

    Grid d_n = matmul_nt(d_y, model.w2);

    // LayerNorm backward using cached xhat / inv_std.
    g.ln_gamma = Grid({hidden});
    g.ln_beta = Grid({hidden});
    Grid d_a({rows, hidden});
    const double inv_cols = 1.0 / static_cast<double>(hidden);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xhat_row = cache.xhat.data() + r * hidden;
        const double* dn_row = d_n.data() + r * hidden;
        const double inv_std = cache.inv_std[r];
        double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < hidden; ++c) {
            const double dxhat = model.ln_gamma[c] * dn_row[c];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat_row[c];
            g.ln_gamma[c] += dn_row[c] * xhat_row[c];
            g.ln_beta[c] += dn_row[c];
        }
        mean_dxhat *= inv_cols;
        mean_dxhat_xhat *= inv_cols;
        double* da_row = d_a.data() + r * hidden;
        for (std::size_t c = 0; c < hidden; ++c) {
            const double dxhat = model.ln_gamma[c] * dn_row[c];
            da_row[c] = inv_std * (dxhat - mean_dxhat - xhat_row[c] * mean_dxhat_xhat);
        }
    }

    // Through GELU: dL/dh = dL/da .* (Phi(h) + h * pdf(h)).
    Grid d_h({rows, hidden});
    for (std::size_t i = 0; i < d_h.size(); ++i) {
        d_h[i] = d_a[i] * (cache.phi[i] + cache.h[i] * normal_pdf(cache.h[i]));
    }

    g.w1 = matmul_tn(cache.x, d_h);
    g.b1 = Grid({hidden});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = d_h.data() + r * hidden;
        for (std::size_t c = 0; c < hidden; ++c) g.b1[c] += row[c];
    }

    if (with_input_grad) {
        g.input = matmul_nt(d_h, model.w1);
    }

    double sq = 0.0;
    for (const Grid* p : g.params()) {
        for (std::size_t i = 0; i < p->size(); ++i) sq += (*p)[i] * (*p)[i];
    }
    g.global_grad_norm = std::sqrt(sq);
    return g;
}

std::pair<double, Grid> loss_mse(const Grid& y, const Grid& target) {
    if (!y.same_shape(target)) throw dim_error("loss_mse: shapes disagree");
    const double inv_n = 1.0 / static_cast<double>(y.size());
    double loss = 0.0;
    Grid d(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double r = y[i] - target[i];
        loss += r * r;
        d[i] = 2.0 * r * inv_n;
    }
    return {loss * inv_n, std::move(d)};
}

std::pair<double, Grid> loss_softmax_ce(const Grid& logits,
                                        const std::vector<std::int32_t>& labels) {
    require_2d(logits, "loss_softmax_ce");
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (labels.size() != rows) throw dim_error("loss_softmax_ce: one label per row required");
    const double inv_rows = 1.0 / static_cast<double>(rows);
    double loss = 0.0;
    Grid d({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const std::int32_t label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= cols) {
            throw input_error("loss_softmax_ce: label out of range");
        }
        const double* row = logits.data() + r * cols;
        double max_logit = row[0];
        for (std::size_t c = 1; c < cols; ++c) max_logit = std::max(max_logit, row[c]);
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) denom += std::exp(row[c] - max_logit);
        const double log_denom = std::log(denom);
        loss += log_denom - (row[static_cast<std::size_t>(label)] - max_logit);
        double* d_row = d.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) {
            const double p = std::exp(row[c] - max_logit) / denom;
            d_row[c] = (p - (static_cast<std::int32_t>(c) == label ? 1.0 : 0.0)) * inv_rows;
        }
    }
    return {loss * inv_rows, std::move(d)};
}

std::pair<double, Grid> loss_bce_bits(const Grid& logits, const Grid& bits) {
    if (!logits.same_shape(bits)) throw dim_error("loss_bce_bits: shapes disagree");
    const double inv_n = 1.0 / static_cast<double>(logits.size());
    double loss = 0.0;
    Grid d(logits.shape());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        const double l = logits[i];
        const double b = bits[i];
        // max(l,0) - l*b + log(1 + exp(-|l|))
        loss += std::max(l, 0.0) - l * b + std::log1p(std::exp(-std::abs(l)));
        const double sig = 1.0 / (1.0 + std::exp(-l));
        d[i] = (sig - b) * inv_n;
    }
    return {loss * inv_n, std::move(d)};
}

AdamW::AdamW(std::span<const Grid* const> params, AdamWConfig cfg) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Grid* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
    }
}

void AdamW::step(std::span<Grid* const> params, std::span<const Grid* const> grads) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw dim_error("AdamW::step: parameter list does not match optimizer state");
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Grid& p = *params[k];
        const Grid& g = *grads[k];
        Grid& m = m_[k];
        Grid& v = v_[k];
        if (!p.same_shape(g) || !p.same_shape(m)) {
            throw dim_error("AdamW::step: gradient shape does not match parameter");
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * p[i]);
        }
    }
}

double grad_norm_variance(const std::vector<double>& norm_trace) {
    if (norm_trace.size() < 2) {
        throw input_error("grad_norm_variance: need at least 2 recorded norms");
    }
    const double n = static_cast<double>(norm_trace.size());
    double mu = 0.0;
    for (double v : norm_trace) mu += v;
    mu /= n;
    double acc = 0.0;
    for (double v : norm_trace) acc += (v - mu) * (v - mu);
    return acc / n;
}

}  // namespace refinery
