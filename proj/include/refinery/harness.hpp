// Experiment configuration, the frozen linear autoencoder, and the runners
// for the four denoising studies plus the refinery/ddpm generation demo.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/report.hpp"
#include "refinery/rng.hpp"

namespace refinery {

struct ExperimentConfig {
    std::string setup = "A";  // A | B | C | depth | refinery | ddpm
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    int epochs = 30;
    std::size_t batch = 256;
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double sigma_train = 0.20;
    double sigma_shift = 0.30;
    std::size_t latent_dim = 64;
    std::size_t codebook_k = 64;
    double mse_target = 0.018;
    std::size_t hidden = 512;
    int ae_epochs = 20;
    std::vector<int> depth_values = {1, 2, 3};

    // Generation demo knobs.
    int demo_epochs = 10;
    std::size_t demo_train_limit = 10000;
    int refinery_scales = 1;  // S
    std::size_t refinery_hidden = 512;
    int ddpm_steps = 200;  // T
    double ddpm_beta_start = 1e-4;
    double ddpm_beta_end = 0.02;
    double temperature = 1.0;
    std::size_t sample_count = 64;

    std::string data_dir;
    std::string out_dir = "out";

    // Flat key=value form in fixed key order (the hashed provenance text).
    std::string canonical_text() const;
    std::string hash() const;  // FNV-1a 64 over canonical_text, hex

    void apply_kv(const std::string& key, const std::string& value);
    static ExperimentConfig from_file(const std::string& path);
};

// Linear encoder/decoder pair trained once on clean images, then frozen.
struct LinearAutoencoder {
    Grid enc_w;  // D x d
    Grid enc_b;  // d
    Grid dec_w;  // d x D
    Grid dec_b;  // D

    Grid encode(const Grid& x) const;  // N x D -> N x d
    Grid decode(const Grid& z) const;  // N x d -> N x D

    // FNV-1a over raw parameter bytes; for frozen-contract checks.
    std::uint64_t param_hash() const;
};

// AdamW on reconstruction MSE for cfg.ae_epochs epochs over clean images.
LinearAutoencoder train_linear_ae(const Grid& train_images, const ExperimentConfig& cfg,
                                  RngStream& rng);

// Hidden width h such that sum_stages h*(in+out+3) + out matches
// reference_params; throws if the floor solution misses by more than 1%.
std::size_t matched_hidden_width(const std::vector<std::pair<std::size_t, std::size_t>>& stages,
                                 std::size_t reference_params);

RunReport run_setup_a(const ExperimentConfig& cfg);
RunReport run_setup_b(const ExperimentConfig& cfg);
RunReport run_setup_c(const ExperimentConfig& cfg);
RunReport run_depth_sweep(const ExperimentConfig& cfg);
RunReport run_refinery_demo(const ExperimentConfig& cfg);
RunReport run_ddpm_demo(const ExperimentConfig& cfg);

// Dispatch on cfg.setup.
RunReport run_setup(const ExperimentConfig& cfg);

inline constexpr const char* kCodeVersion = "refinery 0.1.0";

}  // namespace refinery
