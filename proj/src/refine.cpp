#include "refinery/refine.hpp"

#include <algorithm>
#include <cmath>

#include "refinery/error.hpp"
#include "refinery/pyramid.hpp"

namespace refinery {

namespace {

std::size_t fold101(long i, long n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return static_cast<std::size_t>(i);
}

// Rows view of an H x W x d latent as (H*W) x d.
Grid as_rows(const Grid& values) {
    return values.reshaped({values.dim(0) * values.dim(1), values.dim(2)});
}

Grid rows_to_latent(const Grid& rows, std::size_t h, std::size_t w, std::size_t d) {
    return rows.reshaped({h, w, d});
}

// 3x3 neighborhood patches (reflect-101) of every site, as (H*W) x 9d rows.
Grid context_patches(const Grid& values) {
    const std::size_t h = values.dim(0), w = values.dim(1), d = values.dim(2);
    Grid out({h * w, 9 * d});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            double* row = out.data() + (y * w + x) * 9 * d;
            std::size_t col = 0;
            for (int dy = -1; dy <= 1; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    const std::size_t yy = fold101(static_cast<long>(y) + dy, static_cast<long>(h));
                    const std::size_t xx = fold101(static_cast<long>(x) + dx, static_cast<long>(w));
                    const double* site = values.data() + (yy * w + xx) * d;
                    for (std::size_t c = 0; c < d; ++c) row[col++] = site[c];
                }
            }
        }
    }
    return out;
}

std::int32_t sample_categorical(const double* probs, std::size_t n, RngStream& rng) {
    const double u = rng.uniform01();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<std::int32_t>(i);
    }
    return static_cast<std::int32_t>(n - 1);
}

// log softmax of one row, written into `out`.
void log_softmax_row(const double* logits, std::size_t n, double* out) {
    double mx = logits[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double denom = 0.0;
    for (std::size_t i = 0; i < n; ++i) denom += std::exp(logits[i] - mx);
    const double log_denom = std::log(denom);
    for (std::size_t i = 0; i < n; ++i) out[i] = logits[i] - mx - log_denom;
}

void require_tokens_match_model(const RefineryModel& model, const TokenPyramid& t) {
    const std::size_t s = static_cast<std::size_t>(model.num_scales);
    if (t.num_scales() != s) throw input_error("token pyramid scale count does not match model");
    const auto [bh, bw] = model.level_dims[s];
    if (t.base_h != bh || t.base_w != bw || t.base.size() != bh * bw) {
        throw input_error("token pyramid base dims do not match model ladder");
    }
    for (std::int32_t v : t.base) {
        if (v < 0 || static_cast<std::size_t>(v) >= model.base_codebook.count()) {
            throw input_error("base token index out of range");
        }
    }
    for (std::size_t level = 0; level < s; ++level) {
        const auto& r = t.residual_at_level(level);
        const auto& dims = t.residual_dims_at_level(level);
        if (dims != model.level_dims[level] || r.size() != dims.first * dims.second) {
            throw input_error("residual token dims do not match model ladder");
        }
        for (std::int32_t v : r) {
            if (v < 0 || static_cast<std::size_t>(v) >= model.vocab_at_level(level)) {
                throw input_error("residual token index out of range");
            }
        }
    }
}

}  // namespace

LatentGrid patch_embed(const Grid& img) {
    if (img.rank() != 2) throw dim_error("patch_embed: expected an H x W grid");
    const std::size_t h = img.dim(0), w = img.dim(1);
    if (h % 2 != 0 || w % 2 != 0) {
        throw input_error("patch_embed: dims must be divisible by the patch size 2");
    }
    LatentGrid lat;
    lat.values = Grid({h / 2, w / 2, 4});
    lat.scale = 0;
    for (std::size_t y = 0; y < h / 2; ++y) {
        for (std::size_t x = 0; x < w / 2; ++x) {
            double* site = lat.values.data() + (y * (w / 2) + x) * 4;
            site[0] = img.at2(2 * y, 2 * x);
            site[1] = img.at2(2 * y, 2 * x + 1);
            site[2] = img.at2(2 * y + 1, 2 * x);
            site[3] = img.at2(2 * y + 1, 2 * x + 1);
        }
    }
    return lat;
}

Grid patch_unembed(const LatentGrid& lat) {
    if (lat.values.rank() != 3 || lat.channels() != 4) {
        throw dim_error("patch_unembed: expected an H x W x 4 latent");
    }
    const std::size_t h = lat.height(), w = lat.width();
    Grid img({2 * h, 2 * w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double* site = lat.values.data() + (y * w + x) * 4;
            img.at2(2 * y, 2 * x) = site[0];
            img.at2(2 * y, 2 * x + 1) = site[1];
            img.at2(2 * y + 1, 2 * x) = site[2];
            img.at2(2 * y + 1, 2 * x + 1) = site[3];
        }
    }
    return img;
}

const std::vector<std::int32_t>& TokenPyramid::residual_at_level(std::size_t level) const {
    return residuals.at(residuals.size() - 1 - level);
}

const std::pair<std::size_t, std::size_t>& TokenPyramid::residual_dims_at_level(
    std::size_t level) const {
    return residual_dims.at(residual_dims.size() - 1 - level);
}

std::size_t TokenPyramid::total_sites() const {
    std::size_t n = base.size();
    for (const auto& r : residuals) n += r.size();
    return n;
}

RefineryModel make_refinery_model(int num_scales, std::size_t latent_dim, std::size_t h0,
                                  std::size_t w0, Codebook base_codebook,
                                  std::vector<Codebook> residual_codebooks,
                                  std::size_t predictor_hidden, RngStream& rng) {
    if (num_scales < 1) throw input_error("make_refinery_model: need at least one scale");
    if (residual_codebooks.size() != static_cast<std::size_t>(num_scales)) {
        throw input_error("make_refinery_model: one residual codebook per scale required");
    }
    RefineryModel m;
    m.num_scales = num_scales;
    m.latent_dim = latent_dim;
    m.level_dims.push_back({h0, w0});
    for (int k = 1; k <= num_scales; ++k) {
        const auto [h, w] = m.level_dims.back();
        if (h == 1 && w == 1) {
            throw input_error("make_refinery_model: ladder too deep, level already 1x1");
        }
        m.level_dims.push_back({(h + 1) / 2, (w + 1) / 2});
    }
    m.base_codebook = std::move(base_codebook);
    m.residual_codebooks = std::move(residual_codebooks);
    if (m.base_codebook.dim() != latent_dim) {
        throw input_error("make_refinery_model: base codebook dim does not match latent dim");
    }
    for (std::size_t level = 0; level < m.residual_codebooks.size(); ++level) {
        if (m.residual_codebooks[level].dim() != latent_dim) {
            throw input_error("make_refinery_model: residual codebook dim mismatch");
        }
        MlpConfig cfg{9 * latent_dim, predictor_hidden, m.residual_codebooks[level].count()};
        m.predictors.push_back(MlpModel::init(cfg, rng));
    }
    const auto [bh, bw] = m.level_dims.back();
    const std::size_t vs = m.base_codebook.count();
    m.base_prior = Grid::full({bh, bw, vs}, 1.0 / static_cast<double>(vs));
    return m;
}

TokenPyramid forward_tokenize(const RefineryModel& model, const LatentGrid& l0) {
    if (model.base_codebook.count() == 0) {
        throw state_error("forward_tokenize: codebooks not fitted");
    }
    if (l0.values.rank() != 3 || l0.channels() != model.latent_dim ||
        std::pair{l0.height(), l0.width()} != model.level_dims[0]) {
        throw dim_error("forward_tokenize: latent does not match model ladder");
    }
    const std::size_t s = static_cast<std::size_t>(model.num_scales);

    std::vector<Grid> levels;
    levels.push_back(l0.values);
    for (std::size_t k = 1; k <= s; ++k) levels.push_back(down(levels.back()));

    TokenPyramid t;
    for (std::size_t k = s; k >= 1; --k) {
        const auto [h, w] = model.level_dims[k - 1];
        const Grid residual = sub(levels[k - 1], up(levels[k], h, w));
        t.residuals.push_back(vq_assign(model.residual_codebooks[k - 1], as_rows(residual)));
        t.residual_dims.push_back({h, w});
    }
    const auto [bh, bw] = model.level_dims[s];
    t.base = vq_assign(model.base_codebook, as_rows(levels[s]));
    t.base_h = bh;
    t.base_w = bw;
    return t;
}

LatentGrid detokenize(const RefineryModel& model, const TokenPyramid& t) {
    require_tokens_match_model(model, t);
    const std::size_t s = static_cast<std::size_t>(model.num_scales);
    const std::size_t d = model.latent_dim;

    Grid lat = rows_to_latent(vq_dequantize(model.base_codebook, t.base), t.base_h, t.base_w, d);
    for (std::size_t k = s; k >= 1; --k) {
        const auto [h, w] = model.level_dims[k - 1];
        const Grid context = up(lat, h, w);
        const Grid emb = rows_to_latent(
            vq_dequantize(model.residual_codebooks[k - 1], t.residual_at_level(k - 1)), h, w, d);
        lat = add(context, emb);
    }
    return LatentGrid{std::move(lat), 0};
}

Grid predict_scale(const RefineryModel& model, const LatentGrid& context) {
    const std::size_t level = static_cast<std::size_t>(context.scale);
    if (context.scale < 0 || level >= static_cast<std::size_t>(model.num_scales)) {
        throw input_error("predict_scale: context level outside the residual ladder");
    }
    if (std::pair{context.height(), context.width()} != model.level_dims[level] ||
        context.channels() != model.latent_dim) {
        throw dim_error("predict_scale: context dims do not match the scale ladder");
    }
    const Grid patches = context_patches(context.values);
    Grid logits = mlp_forward(model.predictors[level], patches).first;
    return logits.reshaped(
        {context.height(), context.width(), model.vocab_at_level(level)});
}

GenerateResult generate(const RefineryModel& model, RngStream& rng, double temperature) {
    if (temperature <= 0.0) throw input_error("generate: temperature must be > 0");
    const std::size_t s = static_cast<std::size_t>(model.num_scales);
    const std::size_t d = model.latent_dim;
    const std::size_t vs = model.base_codebook.count();

    GenerateResult res;
    const auto [bh, bw] = model.level_dims[s];
    res.tokens.base_h = bh;
    res.tokens.base_w = bw;
    res.tokens.base.resize(bh * bw);
    for (std::size_t site = 0; site < bh * bw; ++site) {
        res.tokens.base[site] = sample_categorical(model.base_prior.data() + site * vs, vs, rng);
    }
    ++res.stages;

    Grid lat = rows_to_latent(vq_dequantize(model.base_codebook, res.tokens.base), bh, bw, d);
    for (std::size_t k = s; k >= 1; --k) {
        const auto [h, w] = model.level_dims[k - 1];
        Grid context = up(lat, h, w);
        const Grid logits =
            predict_scale(model, LatentGrid{context, static_cast<int>(k - 1)});
        const std::size_t vocab = model.vocab_at_level(k - 1);

        std::vector<std::int32_t> tokens(h * w);
        std::vector<double> probs(vocab);
        for (std::size_t site = 0; site < h * w; ++site) {
            const double* row = logits.data() + site * vocab;
            double mx = row[0];
            for (std::size_t i = 1; i < vocab; ++i) mx = std::max(mx, row[i]);
            double denom = 0.0;
            for (std::size_t i = 0; i < vocab; ++i) {
                probs[i] = std::exp((row[i] - mx) / temperature);
                denom += probs[i];
            }
            for (std::size_t i = 0; i < vocab; ++i) probs[i] /= denom;
            tokens[site] = sample_categorical(probs.data(), vocab, rng);
        }
        ++res.stages;

        const Grid emb =
            rows_to_latent(vq_dequantize(model.residual_codebooks[k - 1], tokens), h, w, d);
        lat = add(context, emb);
        res.tokens.residuals.push_back(std::move(tokens));
        res.tokens.residual_dims.push_back({h, w});
    }

    if (d == 4) {
        res.pixels = patch_unembed(LatentGrid{std::move(lat), 0});
    }
    return res;
}

double log_likelihood(const RefineryModel& model, const TokenPyramid& t) {
    require_tokens_match_model(model, t);
    const std::size_t s = static_cast<std::size_t>(model.num_scales);
    const std::size_t d = model.latent_dim;
    const std::size_t vs = model.base_codebook.count();

    double ll = 0.0;
    for (std::size_t site = 0; site < t.base.size(); ++site) {
        ll += std::log(model.base_prior[site * vs + static_cast<std::size_t>(t.base[site])]);
    }

    Grid lat = rows_to_latent(vq_dequantize(model.base_codebook, t.base), t.base_h, t.base_w, d);
    std::vector<double> log_probs;
    for (std::size_t k = s; k >= 1; --k) {
        const auto [h, w] = model.level_dims[k - 1];
        Grid context = up(lat, h, w);
        const Grid logits =
            predict_scale(model, LatentGrid{context, static_cast<int>(k - 1)});
        const std::size_t vocab = model.vocab_at_level(k - 1);
        const auto& tokens = t.residual_at_level(k - 1);
        log_probs.resize(vocab);
        for (std::size_t site = 0; site < h * w; ++site) {
            log_softmax_row(logits.data() + site * vocab, vocab, log_probs.data());
            ll += log_probs[static_cast<std::size_t>(tokens[site])];
        }
        const Grid emb =
            rows_to_latent(vq_dequantize(model.residual_codebooks[k - 1], tokens), h, w, d);
        lat = add(context, emb);
    }
    return ll;
}

void fit_base_prior(RefineryModel& model, const std::vector<TokenPyramid>& dataset) {
    if (dataset.empty()) throw input_error("fit_base_prior: empty dataset");
    const auto [bh, bw] = model.level_dims[static_cast<std::size_t>(model.num_scales)];
    const std::size_t vs = model.base_codebook.count();
    Grid counts = Grid::full({bh, bw, vs}, 1.0);  // Laplace +1
    for (const TokenPyramid& t : dataset) {
        if (t.base.size() != bh * bw) {
            throw input_error("fit_base_prior: base dims do not match model");
        }
        for (std::size_t site = 0; site < t.base.size(); ++site) {
            counts[site * vs + static_cast<std::size_t>(t.base[site])] += 1.0;
        }
    }
    const double denom = static_cast<double>(dataset.size()) + static_cast<double>(vs);
    model.base_prior = mul_scalar(counts, 1.0 / denom);
}

std::vector<double> train_refinery(RefineryModel& model, const std::vector<TokenPyramid>& dataset,
                                   const RefineryTrainOptions& opts, RngStream& rng) {
    if (dataset.empty()) throw input_error("train_refinery: empty dataset");
    const std::size_t s = static_cast<std::size_t>(model.num_scales);
    const std::size_t d = model.latent_dim;
    const std::size_t n = dataset.size();
    const std::size_t sites_per_example = dataset.front().total_sites();

    fit_base_prior(model, dataset);

    std::vector<AdamW> optimizers;
    optimizers.reserve(s);
    for (std::size_t level = 0; level < s; ++level) {
        const auto params = model.predictors[level].params();
        optimizers.emplace_back(std::span<const Grid* const>(params), opts.adamw);
    }

    const std::size_t vs = model.base_codebook.count();
    std::vector<double> epoch_nll;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        RngStream shuffle_rng = rng.substream(5000 + static_cast<std::uint64_t>(epoch));
        const std::vector<std::size_t> order = random_permutation(n, shuffle_rng);

        double nll_total = 0.0;
        std::size_t examples_seen = 0;
        for (std::size_t start = 0; start < n; start += opts.batch_images) {
            const std::size_t count = std::min(opts.batch_images, n - start);

            // Teacher-forced base level for every image in the batch.
            std::vector<Grid> lat(count);
            double batch_nll = 0.0;
            for (std::size_t b = 0; b < count; ++b) {
                const TokenPyramid& t = dataset[order[start + b]];
                lat[b] = rows_to_latent(vq_dequantize(model.base_codebook, t.base), t.base_h,
                                        t.base_w, d);
                for (std::size_t site = 0; site < t.base.size(); ++site) {
                    batch_nll -= std::log(
                        model.base_prior[site * vs + static_cast<std::size_t>(t.base[site])]);
                }
            }

            for (std::size_t k = s; k >= 1; --k) {
                const auto [h, w] = model.level_dims[k - 1];
                const std::size_t sites = h * w;
                Grid inputs({count * sites, 9 * d});
                std::vector<std::int32_t> labels(count * sites);
                for (std::size_t b = 0; b < count; ++b) {
                    const TokenPyramid& t = dataset[order[start + b]];
                    Grid context = up(lat[b], h, w);
                    const Grid patches = context_patches(context);
                    std::copy(patches.data(), patches.data() + patches.size(),
                              inputs.data() + b * sites * 9 * d);
                    const auto& tokens = t.residual_at_level(k - 1);
                    std::copy(tokens.begin(), tokens.end(), labels.begin() + b * sites);
                    const Grid emb = rows_to_latent(
                        vq_dequantize(model.residual_codebooks[k - 1], tokens), h, w, d);
                    lat[b] = add(context, emb);
                }
                auto [logits, cache] = mlp_forward(model.predictors[k - 1], inputs);
                auto [ce, d_logits] = loss_softmax_ce(logits, labels);
                batch_nll += ce * static_cast<double>(count * sites);
                const GradReport grads =
                    mlp_backward(model.predictors[k - 1], cache, d_logits, false);
                auto params = model.predictors[k - 1].params();
                const auto grad_ptrs = grads.params();
                optimizers[k - 1].step(std::span<Grid* const>(params),
                                       std::span<const Grid* const>(grad_ptrs));
            }
            nll_total += batch_nll;
            examples_seen += count;
        }
        epoch_nll.push_back(nll_total /
                            static_cast<double>(examples_seen * sites_per_example));
    }
    return epoch_nll;
}

}  // namespace refinery
