#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "refinery/error.hpp"
#include "refinery/nn.hpp"
#include "refinery/rng.hpp"

using namespace refinery;

namespace {

// Central finite difference of a scalar-valued function at every element of
// a parameter grid.
Grid finite_diff(Grid& param, const std::function<double()>& eval, double h = 1e-5) {
    Grid g(param.shape());
    for (std::size_t i = 0; i < param.size(); ++i) {
        const double keep = param[i];
        param[i] = keep + h;
        const double up = eval();
        param[i] = keep - h;
        const double down = eval();
        param[i] = keep;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

double max_rel_err(const Grid& analytic, const Grid& numeric) {
    REQUIRE(analytic.same_shape(numeric));
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
    }
    return worst;
}

MlpModel tiny_model(std::size_t in = 3, std::size_t hidden = 4, std::size_t out = 2,
                    std::uint64_t seed = 5) {
    RngStream rng(seed);
    return MlpModel::init({in, hidden, out}, rng);
}

}  // namespace

TEST_CASE("gelu values") {
    Grid x({3}, {0.0, 10.0, -10.0});
    const Grid y = gelu(x);
    CHECK(y[0] == 0.0);
    CHECK(y[1] == doctest::Approx(10.0).epsilon(1e-6));
    CHECK(std::abs(y[2]) < 1e-6);
}

TEST_CASE("gelu_grad matches finite differences") {
    const double points[] = {-2.0, -0.5, 0.0, 0.5, 2.0};
    for (double p : points) {
        Grid x({1}, {p});
        const double analytic = gelu_grad(x)[0];
        const double h = 1e-6;
        Grid xp({1}, {p + h}), xm({1}, {p - h});
        const double numeric = (gelu(xp)[0] - gelu(xm)[0]) / (2.0 * h);
        CHECK(std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-8) < 1e-6);
    }
}

TEST_CASE("layernorm constant row maps to beta") {
    Grid h({1, 8});
    for (std::size_t i = 0; i < 8; ++i) h[i] = 3.7;
    Grid gamma = Grid::full({8}, 1.0);
    Grid beta({8});
    const Grid y = layernorm(h, gamma, beta);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(y[i]) < 1e-9);
}

TEST_CASE("layernorm normalizes rows") {
    RngStream rng(2);
    const Grid h = randn(rng, {4, 64});
    Grid gamma = Grid::full({64}, 1.0);
    Grid beta({64});
    const Grid y = layernorm(h, gamma, beta);
    for (std::size_t r = 0; r < 4; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t c = 0; c < 64; ++c) mu += y[r * 64 + c];
        mu /= 64.0;
        for (std::size_t c = 0; c < 64; ++c) {
            var += (y[r * 64 + c] - mu) * (y[r * 64 + c] - mu);
        }
        var /= 64.0;
        CHECK(std::abs(mu) < 1e-7);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("layernorm backward matches finite differences") {
    RngStream rng(3);
    Grid h = randn(rng, {3, 5});
    Grid gamma = randn(rng, {5});
    Grid beta = randn(rng, {5});
    const Grid d_out = randn(rng, {3, 5});

    auto eval = [&]() {
        const Grid y = layernorm(h, gamma, beta);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * d_out[i];
        return acc;
    };
    const LayerNormGrads g = layernorm_backward(h, gamma, d_out);
    CHECK(max_rel_err(g.d_input, finite_diff(h, eval)) < 1e-4);
    CHECK(max_rel_err(g.d_gamma, finite_diff(gamma, eval)) < 1e-4);
    CHECK(max_rel_err(g.d_beta, finite_diff(beta, eval)) < 1e-4);
}

TEST_CASE("mlp_forward zero weights give zero output") {
    MlpModel m = tiny_model();
    for (Grid* p : m.params()) {
        for (std::size_t i = 0; i < p->size(); ++i) (*p)[i] = 0.0;
    }
    RngStream rng(1);
    const Grid x = randn(rng, {4, 3});
    const Grid y = mlp_forward(m, x).first;
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("mlp rows are independent") {
    const MlpModel m = tiny_model();
    RngStream rng(9);
    const Grid x = randn(rng, {2, 3});
    const Grid y_both = mlp_forward(m, x).first;
    for (std::size_t r = 0; r < 2; ++r) {
        Grid row({1, 3});
        for (std::size_t c = 0; c < 3; ++c) row[c] = x.at2(r, c);
        const Grid y_row = mlp_forward(m, row).first;
        for (std::size_t c = 0; c < y_row.size(); ++c) {
            CHECK(y_row[c] == doctest::Approx(y_both.at2(r, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("mlp_forward equals manual op composition") {
    const MlpModel m = tiny_model(3, 4, 2, 77);
    RngStream rng(8);
    const Grid x = randn(rng, {5, 3});

    Grid h = matmul(x, m.w1);
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t c = 0; c < 4; ++c) h.at2(r, c) += m.b1[c];
    }
    const Grid a = gelu(h);
    const Grid n = layernorm(a, m.ln_gamma, m.ln_beta);
    Grid y = matmul(n, m.w2);
    for (std::size_t r = 0; r < 5; ++r) {
        for (std::size_t c = 0; c < 2; ++c) y.at2(r, c) += m.b2[c];
    }

    const Grid y2 = mlp_forward(m, x).first;
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(std::abs(y[i] - y2[i]) < 1e-12);
    }
}

TEST_CASE("mlp_backward matches finite differences on every parameter") {
    MlpModel m = tiny_model(3, 4, 2, 13);
    RngStream rng(21);
    const Grid x = randn(rng, {6, 3});
    const Grid target = randn(rng, {6, 2});

    auto eval = [&]() {
        const Grid y = mlp_forward(m, x).first;
        return loss_mse(y, target).first;
    };

    auto [y, cache] = mlp_forward(m, x);
    auto [loss, d_y] = loss_mse(y, target);
    (void)loss;
    const GradReport g = mlp_backward(m, cache, d_y, true);

    const std::array<Grid*, 6> params = m.params();
    const std::array<const Grid*, 6> grads = g.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(max_rel_err(*grads[i], finite_diff(*params[i], eval)) < 1e-4);
    }

    // Input gradient too.
    Grid x_var = x;
    auto eval_x = [&]() {
        const Grid yy = mlp_forward(m, x_var).first;
        return loss_mse(yy, target).first;
    };
    CHECK(max_rel_err(g.input, finite_diff(x_var, eval_x)) < 1e-4);
}

TEST_CASE("mlp_backward zero upstream gives zero gradients") {
    const MlpModel m = tiny_model();
    RngStream rng(4);
    const Grid x = randn(rng, {3, 3});
    auto [y, cache] = mlp_forward(m, x);
    (void)y;
    Grid d_y({3, 2});
    const GradReport g = mlp_backward(m, cache, d_y, true);
    for (const Grid* p : g.params()) {
        for (std::size_t i = 0; i < p->size(); ++i) CHECK((*p)[i] == 0.0);
    }
    CHECK(g.global_grad_norm == 0.0);
}

TEST_CASE("mse gradient at perfect prediction is zero") {
    const MlpModel m = tiny_model();
    RngStream rng(5);
    const Grid x = randn(rng, {2, 3});
    auto [y, cache] = mlp_forward(m, x);
    auto [loss, d_y] = loss_mse(y, y);
    CHECK(loss == 0.0);
    const GradReport g = mlp_backward(m, cache, d_y, false);
    CHECK(g.global_grad_norm == 0.0);
}

TEST_CASE("stale cache reuse is a state error") {
    const MlpModel m = tiny_model();
    RngStream rng(6);
    const Grid x = randn(rng, {2, 3});
    auto [y, cache] = mlp_forward(m, x);
    Grid d_y({2, 2}, {1, 0, 0, 1});
    (void)y;
    (void)mlp_backward(m, cache, d_y, false);
    CHECK_THROWS_AS(mlp_backward(m, cache, d_y, false), state_error);
}

TEST_CASE("loss_mse values and gradient") {
    Grid y({1, 2}, {1, 0});
    Grid t({1, 2}, {0, 0});
    auto [loss, d] = loss_mse(y, t);
    CHECK(loss == doctest::Approx(0.5).epsilon(1e-15));

    auto eval = [&]() { return loss_mse(y, t).first; };
    CHECK(max_rel_err(d, finite_diff(y, eval, 1e-6)) < 1e-6);
}

TEST_CASE("loss_softmax_ce uniform logits over 64 classes") {
    Grid logits({2, 64});
    const std::vector<std::int32_t> labels{3, 60};
    auto [loss, d] = loss_softmax_ce(logits, labels);
    (void)d;
    CHECK(loss == doctest::Approx(std::log(64.0)).epsilon(1e-12));
}

TEST_CASE("loss_softmax_ce confident correct logit") {
    Grid logits({1, 4});
    logits[2] = 30.0;
    auto [loss, d] = loss_softmax_ce(logits, {2});
    (void)d;
    CHECK(loss < 1e-9);
}

TEST_CASE("loss_softmax_ce gradient matches finite differences") {
    RngStream rng(3);
    Grid logits = randn(rng, {3, 5});
    const std::vector<std::int32_t> labels{0, 4, 2};
    auto [loss, d] = loss_softmax_ce(logits, labels);
    (void)loss;
    auto eval = [&]() { return loss_softmax_ce(logits, labels).first; };
    CHECK(max_rel_err(d, finite_diff(logits, eval, 1e-6)) < 1e-6);
}

TEST_CASE("loss_softmax_ce rejects out-of-range labels") {
    Grid logits({1, 4});
    CHECK_THROWS_AS(loss_softmax_ce(logits, {4}), input_error);
    CHECK_THROWS_AS(loss_softmax_ce(logits, {-1}), input_error);
}

TEST_CASE("loss_bce_bits values") {
    Grid logits({1, 8});
    Grid bits({1, 8});
    auto [loss, d] = loss_bce_bits(logits, bits);
    (void)d;
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    Grid strong({1, 8});
    Grid target({1, 8});
    for (std::size_t i = 0; i < 8; ++i) {
        target[i] = (i % 2 == 0) ? 1.0 : 0.0;
        strong[i] = target[i] > 0.5 ? 30.0 : -30.0;
    }
    CHECK(loss_bce_bits(strong, target).first < 1e-9);
}

TEST_CASE("loss_bce_bits gradient matches finite differences") {
    RngStream rng(12);
    Grid logits = randn(rng, {2, 8});
    Grid bits({2, 8});
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = (i * 7 % 3 == 0) ? 1.0 : 0.0;
    auto [loss, d] = loss_bce_bits(logits, bits);
    (void)loss;
    auto eval = [&]() { return loss_bce_bits(logits, bits).first; };
    CHECK(max_rel_err(d, finite_diff(logits, eval, 1e-6)) < 1e-6);
}

TEST_CASE("adamw zero gradient, zero decay leaves parameters unchanged") {
    MlpModel m = tiny_model();
    const MlpModel before = m;
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    const auto cp = m.params();
    AdamW opt(std::span<const Grid* const>(cp), cfg);
    GradReport g;
    g.w1 = Grid(m.w1.shape());
    g.b1 = Grid(m.b1.shape());
    g.ln_gamma = Grid(m.ln_gamma.shape());
    g.ln_beta = Grid(m.ln_beta.shape());
    g.w2 = Grid(m.w2.shape());
    g.b2 = Grid(m.b2.shape());
    auto params = m.params();
    const auto grads = g.params();
    opt.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
    const auto pb = before.params();
    const auto pa = m.params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t j = 0; j < pa[i]->size(); ++j) {
            CHECK((*pa[i])[j] == (*pb[i])[j]);
        }
    }
    CHECK(opt.step_count() == 1);
}

TEST_CASE("adamw decoupled decay scales by (1 - lr*lambda)") {
    Grid w({2}, {1.0, -2.0});
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    Grid g({2});
    const Grid* cp[] = {&w};
    AdamW opt(std::span<const Grid* const>(cp, 1), cfg);
    Grid* pp[] = {&w};
    const Grid* gp[] = {&g};
    opt.step(std::span<Grid* const>(pp, 1), std::span<const Grid* const>(gp, 1));
    CHECK(w[0] == doctest::Approx(1.0 * (1 - 0.1 * 0.5)).epsilon(1e-15));
    CHECK(w[1] == doctest::Approx(-2.0 * (1 - 0.1 * 0.5)).epsilon(1e-15));
}

TEST_CASE("adamw minimizes (w-3)^2") {
    Grid w({1}, {0.0});
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.0;
    const Grid* cp[] = {&w};
    AdamW opt(std::span<const Grid* const>(cp, 1), cfg);
    for (int i = 0; i < 2000; ++i) {
        Grid g({1}, {2.0 * (w[0] - 3.0)});
        Grid* pp[] = {&w};
        const Grid* gp[] = {&g};
        opt.step(std::span<Grid* const>(pp, 1), std::span<const Grid* const>(gp, 1));
    }
    CHECK(std::abs(w[0] - 3.0) < 0.01);
}

TEST_CASE("grad_norm_variance") {
    CHECK(grad_norm_variance({2.0, 2.0, 2.0}) == 0.0);
    CHECK(grad_norm_variance({1.0, 3.0}) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK_THROWS_AS(grad_norm_variance({1.0}), input_error);

    // Two-pass oracle on a random trace.
    RngStream rng(4);
    std::vector<double> trace(257);
    for (double& v : trace) v = rng.uniform01() * 10.0;
    double mu = 0.0;
    for (double v : trace) mu += v;
    mu /= static_cast<double>(trace.size());
    double var = 0.0;
    for (double v : trace) var += (v - mu) * (v - mu);
    var /= static_cast<double>(trace.size());
    CHECK(grad_norm_variance(trace) == doctest::Approx(var).epsilon(1e-12));
}

TEST_CASE("adamw training is deterministic") {
    auto run = []() {
        MlpModel m = tiny_model(3, 4, 2, 55);
        const auto cp = m.params();
        AdamW opt(std::span<const Grid* const>(cp), {});
        RngStream rng(99);
        for (int i = 0; i < 50; ++i) {
            const Grid x = randn(rng, {8, 3});
            const Grid t = randn(rng, {8, 2});
            auto [y, cache] = mlp_forward(m, x);
            auto [loss, d_y] = loss_mse(y, t);
            (void)loss;
            const GradReport g = mlp_backward(m, cache, d_y, false);
            auto params = m.params();
            const auto grads = g.params();
            opt.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
        }
        return m;
    };
    const MlpModel a = run();
    const MlpModel b = run();
    const auto pa = a.params();
    const auto pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        for (std::size_t j = 0; j < pa[i]->size(); ++j) {
            CHECK((*pa[i])[j] == (*pb[i])[j]);
        }
    }
}
