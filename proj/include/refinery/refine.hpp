// Coarse-to-fine latent refinement: deterministic tokenization of a latent
// into base codes plus per-scale residual token maps, and the learned
// backward pass that regenerates latents scale by scale with an exact
// cross-scale categorical likelihood.
//
// Scale convention: level 0 is the finest latent; level S is the coarsest
// (the base). Residual map r^(k-1) lives at level k-1 and is predicted from
// the upsampled context of level k.
#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/nn.hpp"
#include "refinery/quantize.hpp"
#include "refinery/rng.hpp"

namespace refinery {

struct LatentGrid {
    Grid values;    // H x W x d
    int scale = 0;  // level index in the ladder

    std::size_t height() const { return values.dim(0); }
    std::size_t width() const { return values.dim(1); }
    std::size_t channels() const { return values.dim(2); }
};

// Non-overlapping 2x2 patches flattened to 4 channels; exact inverse pair.
LatentGrid patch_embed(const Grid& img);
Grid patch_unembed(const LatentGrid& lat);

struct TokenPyramid {
    std::vector<std::int32_t> base;  // row-major H_S x W_S
    std::size_t base_h = 0, base_w = 0;

    // r^(S-1)..r^(0): coarsest first, finest last.
    std::vector<std::vector<std::int32_t>> residuals;
    std::vector<std::pair<std::size_t, std::size_t>> residual_dims;

    std::size_t num_scales() const { return residuals.size(); }

    // Residual map for ladder level `level` (0 = finest).
    const std::vector<std::int32_t>& residual_at_level(std::size_t level) const;
    const std::pair<std::size_t, std::size_t>& residual_dims_at_level(std::size_t level) const;

    // Base sites plus all residual sites.
    std::size_t total_sites() const;
};

struct RefineryModel {
    int num_scales = 0;      // S
    std::size_t latent_dim = 0;  // d

    // Latent dims of levels 0..S (ceil-halving ladder).
    std::vector<std::pair<std::size_t, std::size_t>> level_dims;

    Codebook base_codebook;                    // V_S entries in R^d
    std::vector<Codebook> residual_codebooks;  // [level] quantizes R^(level)

    // Factorised per-site categorical over base codes: H_S x W_S x V_S.
    Grid base_prior;

    // predictors[level] maps the 3x3 context patch (9*d inputs) at that
    // level to V_level logits.
    std::vector<MlpModel> predictors;

    std::size_t vocab_at_level(std::size_t level) const {
        return residual_codebooks[level].count();
    }
};

// Ladder skeleton with uniform base prior and fresh predictor weights.
// Codebooks must already be fitted (or are filled in later by the caller).
RefineryModel make_refinery_model(int num_scales, std::size_t latent_dim,
                                  std::size_t h0, std::size_t w0,
                                  Codebook base_codebook,
                                  std::vector<Codebook> residual_codebooks,
                                  std::size_t predictor_hidden, RngStream& rng);

// Eqs of the deterministic forward pass: Gaussian-ladder the latent, form
// Laplacian residuals, quantize residuals per level and the coarsest latent
// with the base codebook.
TokenPyramid forward_tokenize(const RefineryModel& model, const LatentGrid& l0);

// Reverse of the token maps back into a finest-level latent:
// L^(S) = emb(base); L^(k-1) = up(L^(k)) + emb(r^(k-1)).
LatentGrid detokenize(const RefineryModel& model, const TokenPyramid& t);

// Per-site logits over the residual vocabulary at context.scale. Each site
// sees only its 3x3 neighborhood of the context (reflect-101 padding), so
// all sites are computed independently.
Grid predict_scale(const RefineryModel& model, const LatentGrid& context);

struct GenerateResult {
    TokenPyramid tokens;
    Grid pixels;     // empty unless latent_dim == 4 (the 2x2 patch decode)
    int stages = 0;  // categorical sampling stages executed (base + S scales)
};

// Sample the base from the factorised prior, then refine coarse-to-fine,
// sampling each scale's residual map sitewise at the given temperature.
GenerateResult generate(const RefineryModel& model, RngStream& rng, double temperature);

// Exact teacher-forced log-likelihood of a token pyramid: log p(base) plus
// each scale's categorical log-probabilities with contexts rebuilt from the
// given tokens.
double log_likelihood(const RefineryModel& model, const TokenPyramid& t);

struct RefineryTrainOptions {
    int epochs = 10;
    std::size_t batch_images = 64;
    AdamWConfig adamw = {};
};

// Fits the base prior as Laplace-smoothed empirical frequencies and trains
// the per-scale predictors by teacher-forced maximum likelihood with AdamW.
// Returns the per-epoch mean NLL in nats per site.
std::vector<double> train_refinery(RefineryModel& model,
                                   const std::vector<TokenPyramid>& dataset,
                                   const RefineryTrainOptions& opts, RngStream& rng);

// Empirical per-site base-code frequencies with +1 smoothing.
void fit_base_prior(RefineryModel& model, const std::vector<TokenPyramid>& dataset);

}  // namespace refinery
