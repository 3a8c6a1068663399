#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "refinery/checkpoint.hpp"
#include "refinery/data.hpp"
#include "refinery/error.hpp"
#include "refinery/harness.hpp"
#include "refinery/metrics.hpp"
#include "refinery/quantize.hpp"
#include "refinery/refine.hpp"
#include "refinery/report.hpp"
#include "refinery/rng.hpp"
#include "refinery/synth.hpp"

using namespace refinery;

namespace {

struct TempDir {
    std::string path;
    TempDir() {
        path = (std::filesystem::temp_directory_path() /
                ("refinery_harness_" + std::to_string(::getpid()) + "_" +
                 std::to_string(counter++)))
                   .string();
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    static int counter;
};
int TempDir::counter = 0;

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("psnr formula and sentinels") {
    CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(std::isinf(psnr_from_mse(0.0)));
    CHECK_THROWS_AS(psnr_from_mse(-1.0), input_error);

    Grid pred({2, 2}, {1, 2, 3, 4});
    CHECK(std::isinf(mean_psnr(pred, pred)));
}

TEST_CASE("epochs_to_target") {
    CHECK(epochs_to_target({0.03, 0.019, 0.017}, 0.018) == 3.0);
    CHECK(epochs_to_target({0.03, 0.018}, 0.018) == 2.0);
    CHECK(std::isinf(epochs_to_target({0.03, 0.02}, 0.018)));
}

TEST_CASE("mse and per-image variants agree") {
    Grid a({2, 3}, {0, 0, 0, 1, 1, 1});
    Grid b({2, 3}, {1, 1, 1, 1, 1, 1});
    CHECK(mse(a, b) == doctest::Approx(0.5).epsilon(1e-15));
    const auto per = per_image_mse(a, b);
    CHECK(per[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(per[1] == 0.0);
}

TEST_CASE("report CSV round trip reproduces means and stds") {
    TempDir dir;
    RunReport r;
    r.setup = "A";
    r.seeds = {0, 1, 2};
    r.config_hash = "0123456789abcdef";
    r.code_version = kCodeVersion;
    r.add_metric("mse/pixel", {0.019512341234123412, 0.020112341234123413, 0.0193});
    r.add_metric("epochs/latent", {9.0, std::numeric_limits<double>::infinity(), 8.0});
    r.traces["test_mse/pixel/seed0"] = {0.5, 0.25, 0.125};
    emit_report(r, dir.path);

    const auto metrics = load_report_csv(dir.path + "/report.csv");
    REQUIRE(metrics.size() == 2);
    for (std::size_t i = 0; i < metrics.size(); ++i) {
        CHECK(metrics[i].name == r.metrics[i].name);
        REQUIRE(metrics[i].per_seed.size() == 3);
        for (std::size_t j = 0; j < 3; ++j) {
            if (std::isinf(r.metrics[i].per_seed[j])) {
                CHECK(std::isinf(metrics[i].per_seed[j]));
            } else {
                CHECK(std::abs(metrics[i].per_seed[j] - r.metrics[i].per_seed[j]) < 1e-12);
            }
        }
        if (std::isfinite(r.metrics[i].mean())) {
            CHECK(std::abs(metrics[i].mean() - r.metrics[i].mean()) < 1e-12);
            CHECK(std::abs(metrics[i].sample_std() - r.metrics[i].sample_std()) < 1e-12);
        }
    }

    const std::string csv = slurp(dir.path + "/report.csv");
    CHECK(csv.find("# setup=A") != std::string::npos);
    CHECK(csv.find("# config_hash=0123456789abcdef") != std::string::npos);
    CHECK(csv.find("# seeds=0,1,2") != std::string::npos);

    const std::string md = slurp(dir.path + "/report.md");
    CHECK(md.find("| mse/pixel |") != std::string::npos);
    CHECK(md.find("±") != std::string::npos);

    const std::string tsv = slurp(dir.path + "/trace.tsv");
    CHECK(tsv.find("test_mse/pixel/seed0\t3\t0.125") != std::string::npos);
}

TEST_CASE("emitting the same report twice is byte-identical") {
    TempDir d1, d2;
    RunReport r;
    r.setup = "B";
    r.seeds = {0, 1};
    r.config_hash = "feedfacefeedface";
    r.code_version = kCodeVersion;
    r.add_metric("m", {1.0 / 3.0, 2.0 / 7.0});
    r.add_timing_metric("seconds", {0.123456, 0.954321});
    emit_report(r, d1.path);
    emit_report(r, d2.path);
    CHECK(slurp(d1.path + "/report.csv") == slurp(d2.path + "/report.csv"));
    CHECK(slurp(d1.path + "/report.md") == slurp(d2.path + "/report.md"));
    CHECK(slurp(d1.path + "/trace.tsv") == slurp(d2.path + "/trace.tsv"));
    // Timing values live outside report.csv.
    CHECK(slurp(d1.path + "/report.csv").find("seconds") == std::string::npos);
    CHECK(slurp(d1.path + "/timing.csv").find("seconds") != std::string::npos);
}

TEST_CASE("config defaults match the common setup and hash is stable") {
    ExperimentConfig cfg;
    CHECK(cfg.seeds == std::vector<std::uint64_t>{0, 1, 2});
    CHECK(cfg.epochs == 30);
    CHECK(cfg.batch == 256);
    CHECK(cfg.lr == 1e-3);
    CHECK(cfg.weight_decay == 1e-4);
    CHECK(cfg.sigma_train == 0.20);
    CHECK(cfg.sigma_shift == 0.30);
    CHECK(cfg.latent_dim == 64);
    CHECK(cfg.codebook_k == 64);
    CHECK(cfg.mse_target == 0.018);
    CHECK(cfg.hidden == 512);

    ExperimentConfig same;
    CHECK(cfg.hash() == same.hash());
    same.epochs = 31;
    CHECK(cfg.hash() != same.hash());
}

TEST_CASE("config file parsing mirrors apply_kv") {
    TempDir dir;
    const std::string path = dir.path + "/cfg";
    {
        std::ofstream f(path);
        f << "# comment\n";
        f << "setup=C\n";
        f << "seeds=5,6\n";
        f << "epochs=3\n";
        f << "sigma_train=0.25\n";
        f << "depth_values=1,3\n";
    }
    const ExperimentConfig cfg = ExperimentConfig::from_file(path);
    CHECK(cfg.setup == "C");
    CHECK(cfg.seeds == std::vector<std::uint64_t>{5, 6});
    CHECK(cfg.epochs == 3);
    CHECK(cfg.sigma_train == 0.25);
    CHECK(cfg.depth_values == std::vector<int>{1, 3});

    ExperimentConfig bad;
    CHECK_THROWS_AS(bad.apply_kv("nonsense", "1"), input_error);
}

TEST_CASE("matched_hidden_width reproduces the documented solutions") {
    // Single-shot 784 -> 512 -> 784 reference.
    const std::size_t reference = 512 * (784 + 784 + 3) + 784;
    CHECK(matched_hidden_width({{784, 784}}, reference) == 512);
    // Two-stage split.
    const std::size_t h2 = matched_hidden_width({{196, 196}, {1568, 784}}, reference);
    CHECK(h2 == 292);
    // Three-stage split.
    const std::size_t h3 =
        matched_hidden_width({{49, 49}, {392, 196}, {1568, 784}}, reference);
    CHECK(h3 == 263);
    CHECK_THROWS_AS(matched_hidden_width({{49, 49}}, 49), input_error);
}

TEST_CASE("linear autoencoder is affine and frozen by value semantics") {
    std::vector<std::int32_t> labels;
    const Grid images = synth_digit_images(512, 7, &labels);
    const Grid flat = flatten_examples(images);

    ExperimentConfig cfg;
    cfg.ae_epochs = 2;
    cfg.latent_dim = 16;
    RngStream rng(3);
    const LinearAutoencoder ae = train_linear_ae(flat, cfg, rng);
    const std::uint64_t hash_after_training = ae.param_hash();

    // Affinity: E(a*x) - E(0) == a * (E(x) - E(0)).
    Grid x({1, 784});
    for (std::size_t i = 0; i < 784; ++i) x[i] = flat[i];
    Grid zero({1, 784});
    const Grid ex = ae.encode(x);
    const Grid e0 = ae.encode(zero);
    Grid x2 = mul_scalar(x, 2.5);
    const Grid ex2 = ae.encode(x2);
    for (std::size_t c = 0; c < 16; ++c) {
        CHECK(ex2[c] - e0[c] == doctest::Approx(2.5 * (ex[c] - e0[c])).epsilon(1e-9));
    }

    // Trained AE reconstructs better than an untrained one.
    RngStream rng2(3);
    ExperimentConfig cfg0 = cfg;
    cfg0.ae_epochs = 0;
    const LinearAutoencoder untrained = train_linear_ae(flat, cfg0, rng2);
    const double trained_mse = mse(ae.decode(ae.encode(flat)), flat);
    const double untrained_mse = mse(untrained.decode(untrained.encode(flat)), flat);
    CHECK(trained_mse < untrained_mse);

    // Using the encoder/decoder does not mutate it.
    (void)ae.encode(flat);
    (void)ae.decode(ae.encode(flat));
    CHECK(ae.param_hash() == hash_after_training);
}

TEST_CASE("checkpoint sections round trip") {
    TempDir dir;
    const std::string path = dir.path + "/model.rfny";

    RngStream rng(9);
    Codebook base;
    base.entries = randn(rng, {4, 2});
    Codebook res;
    res.entries = randn(rng, {3, 2});
    res.bit_codes = {7, 9, 250};
    RefineryModel m = make_refinery_model(1, 2, 4, 4, base, {res}, 8, rng);
    fit_base_prior(m, {[] {
                        TokenPyramid t;
                        t.base = {0, 1, 2, 3};
                        t.base_h = t.base_w = 2;
                        t.residuals.push_back(std::vector<std::int32_t>(16, 1));
                        t.residual_dims.push_back({4, 4});
                        return t;
                    }()});

    save_refinery_model(path, m);
    const RefineryModel back = load_refinery_model(path);
    CHECK(back.num_scales == m.num_scales);
    CHECK(back.latent_dim == m.latent_dim);
    CHECK(back.level_dims == m.level_dims);
    CHECK(back.residual_codebooks[0].bit_codes == res.bit_codes);
    for (std::size_t i = 0; i < m.base_prior.size(); ++i) {
        CHECK(back.base_prior[i] == m.base_prior[i]);
    }
    for (std::size_t i = 0; i < m.predictors[0].w1.size(); ++i) {
        CHECK(back.predictors[0].w1[i] == m.predictors[0].w1[i]);
    }

    // Same likelihoods after reload.
    TokenPyramid t;
    t.base = {0, 1, 2, 3};
    t.base_h = t.base_w = 2;
    t.residuals.push_back(std::vector<std::int32_t>(16, 1));
    t.residual_dims.push_back({4, 4});
    CHECK(log_likelihood(back, t) == log_likelihood(m, t));

    // Corrupt magic is rejected.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.put('X');
    }
    CHECK_THROWS_AS(load_refinery_model(path), parse_error);
}

TEST_CASE("pgm sheet writer produces a valid header and payload") {
    TempDir dir;
    Grid imgs({3, 4});
    for (std::size_t i = 0; i < imgs.size(); ++i) {
        imgs[i] = static_cast<double>(i) / static_cast<double>(imgs.size());
    }
    const std::string path = dir.path + "/sheet.pgm";
    write_pgm_sheet(path, imgs, 2, 2, 2);
    const std::string bytes = slurp(path);
    CHECK(bytes.rfind("P5\n4 4\n255\n", 0) == 0);
    CHECK(bytes.size() == std::string("P5\n4 4\n255\n").size() + 16);
}

TEST_CASE("demo pipeline runs end to end on a small corpus") {
    // A miniature refinery+ddpm comparison: exercises codebook fitting,
    // tokenization, training, likelihood, sampling, report and sheet output.
    TempDir data_dir, out_dir;
    write_synth_corpus(data_dir.path, 256, 64, 11);

    ExperimentConfig cfg;
    cfg.setup = "refinery";
    cfg.seeds = {0};
    cfg.data_dir = data_dir.path;
    cfg.out_dir = out_dir.path;
    cfg.demo_epochs = 2;
    cfg.demo_train_limit = 128;
    cfg.codebook_k = 16;
    cfg.refinery_hidden = 32;
    cfg.hidden = 32;
    cfg.ddpm_steps = 25;
    cfg.sample_count = 4;

    const RunReport report = run_refinery_demo(cfg);
    CHECK(report.metric("refinery_stages").per_seed[0] == 2.0);  // S+1 with S=1
    CHECK(report.metric("ddpm_steps").per_seed[0] == 25.0);
    CHECK(std::isfinite(report.metric("refinery_test_nll_per_site").per_seed[0]));
    CHECK(report.metric("refinery_test_nll_per_site").per_seed[0] > 0.0);

    emit_report(report, cfg.out_dir);
    CHECK(std::filesystem::exists(out_dir.path + "/report.csv"));
    CHECK(std::filesystem::exists(out_dir.path + "/samples.pgm"));
    CHECK(std::filesystem::exists(out_dir.path + "/refinery_model.rfny"));

    // The saved checkpoint reloads into a usable model.
    const RefineryModel back = load_refinery_model(out_dir.path + "/refinery_model.rfny");
    RngStream rng(1);
    const GenerateResult g = generate(back, rng, 1.0);
    CHECK(g.stages == 2);
}
