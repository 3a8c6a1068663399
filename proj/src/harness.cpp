#include "refinery/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>

#include "refinery/checkpoint.hpp"
#include "refinery/data.hpp"
#include "refinery/ddpm.hpp"
#include "refinery/error.hpp"
#include "refinery/metrics.hpp"
#include "refinery/nn.hpp"
#include "refinery/pyramid.hpp"
#include "refinery/quantize.hpp"
#include "refinery/refine.hpp"

namespace refinery {

namespace {

// Substream roles off each seed's master stream. Arms share batch order and
// per-batch noise so every method sees identical corrupted inputs.
enum StreamRole : std::uint64_t {
    kRoleAeInit = 1,
    kRoleArmInit = 10,  // + arm index
    kRoleKmeans = 30,
    kRoleBitCodes = 31,
    kRoleShuffle = 40,
    kRoleTrainNoise = 50,  // substream(epoch) then substream(batch)
    kRoleTestNoiseTrain = 60,
    kRoleTestNoiseShift = 61,
    kRoleRefineryInit = 70,
    kRoleRefineryTrain = 71,
    kRoleRefinerySample = 72,
    kRoleDdpmInit = 80,
    kRoleDdpmTrain = 81,
    kRoleDdpmSample = 82,
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------- config

std::string join_u64(const std::vector<std::uint64_t>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

std::string join_int(const std::vector<int>& v) {
    std::ostringstream os;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}

}  // namespace

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream os;
    os << "setup=" << setup << "\n";
    os << "seeds=" << join_u64(seeds) << "\n";
    os << "epochs=" << epochs << "\n";
    os << "batch=" << batch << "\n";
    os << "lr=" << format_double(lr) << "\n";
    os << "weight_decay=" << format_double(weight_decay) << "\n";
    os << "sigma_train=" << format_double(sigma_train) << "\n";
    os << "sigma_shift=" << format_double(sigma_shift) << "\n";
    os << "latent_dim=" << latent_dim << "\n";
    os << "codebook_k=" << codebook_k << "\n";
    os << "mse_target=" << format_double(mse_target) << "\n";
    os << "hidden=" << hidden << "\n";
    os << "ae_epochs=" << ae_epochs << "\n";
    os << "depth_values=" << join_int(depth_values) << "\n";
    os << "demo_epochs=" << demo_epochs << "\n";
    os << "demo_train_limit=" << demo_train_limit << "\n";
    os << "refinery_scales=" << refinery_scales << "\n";
    os << "refinery_hidden=" << refinery_hidden << "\n";
    os << "ddpm_steps=" << ddpm_steps << "\n";
    os << "ddpm_beta_start=" << format_double(ddpm_beta_start) << "\n";
    os << "ddpm_beta_end=" << format_double(ddpm_beta_end) << "\n";
    os << "temperature=" << format_double(temperature) << "\n";
    os << "sample_count=" << sample_count << "\n";
    return os.str();
}

std::string ExperimentConfig::hash() const {
    const std::string text = canonical_text();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void ExperimentConfig::apply_kv(const std::string& key, const std::string& value) {
    auto parse_u64_list = [](const std::string& s) {
        std::vector<std::uint64_t> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) out.push_back(std::stoull(item));
        }
        return out;
    };
    auto parse_int_list = [](const std::string& s) {
        std::vector<int> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (!item.empty()) out.push_back(std::stoi(item));
        }
        return out;
    };
    if (key == "setup") setup = value;
    else if (key == "seeds") seeds = parse_u64_list(value);
    else if (key == "epochs") epochs = std::stoi(value);
    else if (key == "batch") batch = std::stoul(value);
    else if (key == "lr") lr = std::stod(value);
    else if (key == "weight_decay") weight_decay = std::stod(value);
    else if (key == "sigma_train") sigma_train = std::stod(value);
    else if (key == "sigma_shift") sigma_shift = std::stod(value);
    else if (key == "latent_dim") latent_dim = std::stoul(value);
    else if (key == "codebook_k") codebook_k = std::stoul(value);
    else if (key == "mse_target") mse_target = std::stod(value);
    else if (key == "hidden") hidden = std::stoul(value);
    else if (key == "ae_epochs") ae_epochs = std::stoi(value);
    else if (key == "depth_values") depth_values = parse_int_list(value);
    else if (key == "demo_epochs") demo_epochs = std::stoi(value);
    else if (key == "demo_train_limit") demo_train_limit = std::stoul(value);
    else if (key == "refinery_scales") refinery_scales = std::stoi(value);
    else if (key == "refinery_hidden") refinery_hidden = std::stoul(value);
    else if (key == "ddpm_steps") ddpm_steps = std::stoi(value);
    else if (key == "ddpm_beta_start") ddpm_beta_start = std::stod(value);
    else if (key == "ddpm_beta_end") ddpm_beta_end = std::stod(value);
    else if (key == "temperature") temperature = std::stod(value);
    else if (key == "sample_count") sample_count = std::stoul(value);
    else if (key == "data_dir") data_dir = value;
    else if (key == "out_dir") out_dir = value;
    else throw input_error("unknown config key '" + key + "'");
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw io_error("cannot open config file " + path);
    ExperimentConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw parse_error(path + ":" + std::to_string(line_no) + ": expected key=value");
        }
        cfg.apply_kv(line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

// ---------------------------------------------------------- linear autoencoder

Grid LinearAutoencoder::encode(const Grid& x) const {
    Grid z = matmul(x, enc_w);
    const std::size_t d = enc_b.size();
    for (std::size_t r = 0; r < z.dim(0); ++r) {
        for (std::size_t c = 0; c < d; ++c) z[r * d + c] += enc_b[c];
    }
    return z;
}

Grid LinearAutoencoder::decode(const Grid& z) const {
    Grid x = matmul(z, dec_w);
    const std::size_t d = dec_b.size();
    for (std::size_t r = 0; r < x.dim(0); ++r) {
        for (std::size_t c = 0; c < d; ++c) x[r * d + c] += dec_b[c];
    }
    return x;
}

std::uint64_t LinearAutoencoder::param_hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto feed = [&h](const Grid& g) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(g.data());
        for (std::size_t i = 0; i < g.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ull;
        }
    };
    feed(enc_w);
    feed(enc_b);
    feed(dec_w);
    feed(dec_b);
    return h;
}

LinearAutoencoder train_linear_ae(const Grid& train_images, const ExperimentConfig& cfg,
                                  RngStream& rng) {
    const std::size_t data_dim = train_images.dim(1);
    const std::size_t d = cfg.latent_dim;

    LinearAutoencoder ae;
    ae.enc_w = randn(rng, {data_dim, d});
    const double s_enc = std::sqrt(2.0 / static_cast<double>(data_dim));
    for (std::size_t i = 0; i < ae.enc_w.size(); ++i) ae.enc_w[i] *= s_enc;
    ae.enc_b = Grid({d});
    ae.dec_w = randn(rng, {d, data_dim});
    const double s_dec = std::sqrt(2.0 / static_cast<double>(d));
    for (std::size_t i = 0; i < ae.dec_w.size(); ++i) ae.dec_w[i] *= s_dec;
    ae.dec_b = Grid({data_dim});

    std::array<Grid*, 4> params{&ae.enc_w, &ae.enc_b, &ae.dec_w, &ae.dec_b};
    std::array<const Grid*, 4> cparams{&ae.enc_w, &ae.enc_b, &ae.dec_w, &ae.dec_b};
    AdamW opt(std::span<const Grid* const>(cparams),
              AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8});

    const Batcher batcher(train_images.dim(0), cfg.batch, rng.substream(kRoleShuffle));
    for (int epoch = 0; epoch < cfg.ae_epochs; ++epoch) {
        for (const auto& idx : batcher.epoch(static_cast<std::uint64_t>(epoch))) {
            const Grid x = gather_rows(train_images, idx);
            const std::size_t rows = x.dim(0);

            const Grid z = ae.encode(x);
            const Grid xhat = ae.decode(z);

            Grid d_xhat({rows, data_dim});
            const double scale = 2.0 / static_cast<double>(xhat.size());
            for (std::size_t i = 0; i < xhat.size(); ++i) {
                d_xhat[i] = scale * (xhat[i] - x[i]);
            }

            Grid g_dec_w = matmul_tn(z, d_xhat);
            Grid g_dec_b({data_dim});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < data_dim; ++c) g_dec_b[c] += d_xhat[r * data_dim + c];
            }
            const Grid d_z = matmul_nt(d_xhat, ae.dec_w);
            Grid g_enc_w = matmul_tn(x, d_z);
            Grid g_enc_b({d});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < d; ++c) g_enc_b[c] += d_z[r * d + c];
            }

            std::array<const Grid*, 4> grads{&g_enc_w, &g_enc_b, &g_dec_w, &g_dec_b};
            opt.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
        }
    }
    return ae;
}

std::size_t matched_hidden_width(const std::vector<std::pair<std::size_t, std::size_t>>& stages,
                                 std::size_t reference_params) {
    std::size_t fixed = 0, per_h = 0;
    for (const auto& [in, out] : stages) {
        fixed += out;
        per_h += in + out + 3;
    }
    if (per_h == 0 || reference_params <= fixed) {
        throw input_error("matched_hidden_width: reference too small for the stage list");
    }
    const std::size_t h = (reference_params - fixed) / per_h;
    const std::size_t achieved = h * per_h + fixed;
    const double mismatch = std::abs(static_cast<double>(achieved) -
                                     static_cast<double>(reference_params)) /
                            static_cast<double>(reference_params);
    if (mismatch > 0.01) {
        throw state_error("matched_hidden_width: cannot match parameter count within 1%");
    }
    return h;
}

// ------------------------------------------------------------- arm plumbing

namespace {

// Per-row pyramid helpers on flattened batches of square images.
Grid down_batch(const Grid& rows, std::size_t h, std::size_t w) {
    const std::size_t n = rows.dim(0);
    const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
    Grid out({n, oh * ow});
    for (std::size_t i = 0; i < n; ++i) {
        Grid img({h, w});
        std::copy(rows.data() + i * h * w, rows.data() + (i + 1) * h * w, img.data());
        const Grid small = down(img);
        std::copy(small.data(), small.data() + oh * ow, out.data() + i * oh * ow);
    }
    return out;
}

Grid up_batch(const Grid& rows, std::size_t h, std::size_t w, std::size_t th, std::size_t tw) {
    const std::size_t n = rows.dim(0);
    Grid out({n, th * tw});
    for (std::size_t i = 0; i < n; ++i) {
        Grid img({h, w});
        std::copy(rows.data() + i * h * w, rows.data() + (i + 1) * h * w, img.data());
        const Grid big = up(img, th, tw);
        std::copy(big.data(), big.data() + th * tw, out.data() + i * th * tw);
    }
    return out;
}

Grid hconcat(const Grid& a, const Grid& b) {
    const std::size_t n = a.dim(0), wa = a.dim(1), wb = b.dim(1);
    Grid out({n, wa + wb});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy(a.data() + i * wa, a.data() + (i + 1) * wa, out.data() + i * (wa + wb));
        std::copy(b.data() + i * wb, b.data() + (i + 1) * wb, out.data() + i * (wa + wb) + wa);
    }
    return out;
}

// One experimental method: training consumes shared batches, prediction maps
// noisy pixels to denoised pixels for the common evaluation path.
class Arm {
public:
    virtual ~Arm() = default;
    virtual const std::string& name() const { return name_; }

    virtual void train_batch(const std::vector<std::size_t>& idx, const Grid& x_clean,
                             const Grid& x_noisy) = 0;
    virtual Grid predict_pixels(const Grid& x_noisy) const = 0;

    virtual std::size_t param_count() const = 0;

    const std::vector<double>& grad_norms() const { return grad_norms_; }

protected:
    explicit Arm(std::string name) : name_(std::move(name)) {}
    std::string name_;
    std::vector<double> grad_norms_;
};

// Pixel-space MSE denoiser (Setup A pixel arm, Setup C single-shot is the
// banded arm with one stage).
class PixelArm : public Arm {
public:
    PixelArm(std::string name, std::size_t dim, std::size_t hidden, const AdamWConfig& adamw,
             RngStream rng)
        : Arm(std::move(name)),
          model_(MlpModel::init({dim, hidden, dim}, rng)),
          opt_(make_opt(model_, adamw)) {}

    void train_batch(const std::vector<std::size_t>&, const Grid& x_clean,
                     const Grid& x_noisy) override {
        auto [y, cache] = mlp_forward(model_, x_noisy);
        auto [loss, d_y] = loss_mse(y, x_clean);
        (void)loss;
        const GradReport g = mlp_backward(model_, cache, d_y, false);
        grad_norms_.push_back(g.global_grad_norm);
        auto params = model_.params();
        const auto grads = g.params();
        opt_.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
    }

    Grid predict_pixels(const Grid& x_noisy) const override {
        return mlp_forward(model_, x_noisy).first;
    }

    std::size_t param_count() const override { return model_.param_count(); }

private:
    static AdamW make_opt(const MlpModel& m, const AdamWConfig& cfg) {
        const auto p = m.params();
        return AdamW(std::span<const Grid* const>(p), cfg);
    }
    MlpModel model_;
    AdamW opt_;
};

// Latent-space regressor through a frozen linear AE. When a codebook is
// given, predictions are snapped to the nearest centroid before decoding
// (the dequantised evaluation of the discrete-vs-continuous study).
class LatentArm : public Arm {
public:
    LatentArm(std::string name, const LinearAutoencoder& ae, std::size_t hidden,
              const AdamWConfig& adamw, RngStream rng, const Codebook* dequantize_with = nullptr)
        : Arm(std::move(name)),
          ae_(ae),
          model_(MlpModel::init({ae.enc_b.size(), hidden, ae.enc_b.size()}, rng)),
          opt_(make_opt(model_, adamw)),
          codebook_(dequantize_with) {}

    void train_batch(const std::vector<std::size_t>&, const Grid& x_clean,
                     const Grid& x_noisy) override {
        const Grid z_in = ae_.encode(x_noisy);
        const Grid z_target = ae_.encode(x_clean);
        auto [z_hat, cache] = mlp_forward(model_, z_in);
        auto [loss, d_z] = loss_mse(z_hat, z_target);
        (void)loss;
        const GradReport g = mlp_backward(model_, cache, d_z, false);
        grad_norms_.push_back(g.global_grad_norm);
        auto params = model_.params();
        const auto grads = g.params();
        opt_.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
    }

    Grid predict_pixels(const Grid& x_noisy) const override {
        Grid z_hat = mlp_forward(model_, ae_.encode(x_noisy)).first;
        if (codebook_) {
            z_hat = vq_dequantize(*codebook_, vq_assign(*codebook_, z_hat));
        }
        return ae_.decode(z_hat);
    }

    std::size_t param_count() const override { return model_.param_count(); }

private:
    static AdamW make_opt(const MlpModel& m, const AdamWConfig& cfg) {
        const auto p = m.params();
        return AdamW(std::span<const Grid* const>(p), cfg);
    }
    const LinearAutoencoder& ae_;
    MlpModel model_;
    AdamW opt_;
    const Codebook* codebook_;
};

// Classification head over nearest-code indices (Softmax-64).
class SoftmaxArm : public Arm {
public:
    SoftmaxArm(std::string name, const LinearAutoencoder& ae, const Codebook& cb,
               std::vector<std::int32_t> train_labels, std::size_t hidden,
               const AdamWConfig& adamw, RngStream rng)
        : Arm(std::move(name)),
          ae_(ae),
          cb_(cb),
          labels_(std::move(train_labels)),
          model_(MlpModel::init({ae.enc_b.size(), hidden, cb.count()}, rng)),
          opt_(make_opt(model_, adamw)) {}

    void train_batch(const std::vector<std::size_t>& idx, const Grid&,
                     const Grid& x_noisy) override {
        const Grid z_in = ae_.encode(x_noisy);
        std::vector<std::int32_t> batch_labels(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) batch_labels[i] = labels_[idx[i]];
        auto [logits, cache] = mlp_forward(model_, z_in);
        auto [loss, d_logits] = loss_softmax_ce(logits, batch_labels);
        (void)loss;
        const GradReport g = mlp_backward(model_, cache, d_logits, false);
        grad_norms_.push_back(g.global_grad_norm);
        auto params = model_.params();
        const auto grads = g.params();
        opt_.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
    }

    Grid predict_pixels(const Grid& x_noisy) const override {
        const Grid logits = mlp_forward(model_, ae_.encode(x_noisy)).first;
        const std::size_t n = logits.dim(0), v = logits.dim(1);
        std::vector<std::int32_t> pick(n);
        for (std::size_t r = 0; r < n; ++r) {
            const double* row = logits.data() + r * v;
            std::size_t best = 0;
            for (std::size_t c = 1; c < v; ++c) {
                if (row[c] > row[best]) best = c;
            }
            pick[r] = static_cast<std::int32_t>(best);
        }
        return ae_.decode(vq_dequantize(cb_, pick));
    }

    std::size_t param_count() const override { return model_.param_count(); }

private:
    static AdamW make_opt(const MlpModel& m, const AdamWConfig& cfg) {
        const auto p = m.params();
        return AdamW(std::span<const Grid* const>(p), cfg);
    }
    const LinearAutoencoder& ae_;
    const Codebook& cb_;
    std::vector<std::int32_t> labels_;
    MlpModel model_;
    AdamW opt_;
};

// Eight independent Bernoulli heads over the codebook's bit codes.
class BitwiseArm : public Arm {
public:
    BitwiseArm(std::string name, const LinearAutoencoder& ae, const Codebook& cb,
               const std::vector<std::int32_t>& train_labels, std::size_t hidden,
               const AdamWConfig& adamw, RngStream rng)
        : Arm(std::move(name)),
          ae_(ae),
          cb_(cb),
          model_(MlpModel::init({ae.enc_b.size(), hidden, 8}, rng)),
          opt_(make_opt(model_, adamw)) {
        bits_ = Grid({train_labels.size(), 8});
        for (std::size_t i = 0; i < train_labels.size(); ++i) {
            const std::vector<double> b = code_word_bits(cb, train_labels[i]);
            std::copy(b.begin(), b.end(), bits_.data() + i * 8);
        }
    }

    void train_batch(const std::vector<std::size_t>& idx, const Grid&,
                     const Grid& x_noisy) override {
        const Grid z_in = ae_.encode(x_noisy);
        Grid batch_bits({idx.size(), 8});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            std::copy(bits_.data() + idx[i] * 8, bits_.data() + (idx[i] + 1) * 8,
                      batch_bits.data() + i * 8);
        }
        auto [logits, cache] = mlp_forward(model_, z_in);
        auto [loss, d_logits] = loss_bce_bits(logits, batch_bits);
        (void)loss;
        const GradReport g = mlp_backward(model_, cache, d_logits, false);
        grad_norms_.push_back(g.global_grad_norm);
        auto params = model_.params();
        const auto grads = g.params();
        opt_.step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
    }

    Grid predict_pixels(const Grid& x_noisy) const override {
        Grid logits = mlp_forward(model_, ae_.encode(x_noisy)).first;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            logits[i] = 1.0 / (1.0 + std::exp(-logits[i]));
        }
        return ae_.decode(vq_dequantize(cb_, decode_bits(cb_, logits)));
    }

    std::size_t param_count() const override { return model_.param_count(); }

private:
    static AdamW make_opt(const MlpModel& m, const AdamWConfig& cfg) {
        const auto p = m.params();
        return AdamW(std::span<const Grid* const>(p), cfg);
    }
    const LinearAutoencoder& ae_;
    const Codebook& cb_;
    Grid bits_;
    MlpModel model_;
    AdamW opt_;
};

// Coarse-to-fine banded denoiser over an S-band pixel Laplacian split.
// bands == 1 collapses to the single-shot MLP. The coarsest stage denoises
// G_{S-1}; each finer stage predicts the residual band from the upsampled
// running estimate concatenated with the noisy input at that level. No
// gradient crosses stage boundaries.
class BandedArm : public Arm {
public:
    BandedArm(std::string name, int bands, std::size_t img_h, std::size_t img_w,
              std::size_t hidden, const AdamWConfig& adamw, RngStream rng)
        : Arm(std::move(name)), bands_(bands) {
        level_dims_.push_back({img_h, img_w});
        for (int k = 1; k < bands; ++k) {
            const auto [h, w] = level_dims_.back();
            level_dims_.push_back({(h + 1) / 2, (w + 1) / 2});
        }
        // Coarsest first in stage order.
        {
            const auto [h, w] = level_dims_.back();
            stage_in_out_.push_back({h * w, h * w});
        }
        for (int level = bands - 2; level >= 0; --level) {
            const auto [h, w] = level_dims_[static_cast<std::size_t>(level)];
            stage_in_out_.push_back({2 * h * w, h * w});
        }
        for (const auto& [in, out] : stage_in_out_) {
            models_.push_back(MlpModel::init({in, hidden, out}, rng));
            const auto p = models_.back().params();
            opts_.emplace_back(std::span<const Grid* const>(p), adamw);
        }
    }

    void train_batch(const std::vector<std::size_t>&, const Grid& x_clean,
                     const Grid& x_noisy) override {
        // Noisy and clean Gaussian ladders, finest first.
        std::vector<Grid> noisy_levels{x_noisy}, clean_levels{x_clean};
        for (int level = 1; level < bands_; ++level) {
            const auto [ph, pw] = level_dims_[static_cast<std::size_t>(level - 1)];
            noisy_levels.push_back(down_batch(noisy_levels.back(), ph, pw));
            clean_levels.push_back(down_batch(clean_levels.back(), ph, pw));
        }

        double sq_norm = 0.0;
        // Coarsest stage: denoise G_{S-1}.
        Grid estimate;
        {
            auto [y, cache] = mlp_forward(models_[0], noisy_levels.back());
            auto [loss, d_y] = loss_mse(y, clean_levels.back());
            (void)loss;
            const GradReport g = mlp_backward(models_[0], cache, d_y, false);
            sq_norm += g.global_grad_norm * g.global_grad_norm;
            auto params = models_[0].params();
            const auto grads = g.params();
            opts_[0].step(std::span<Grid* const>(params), std::span<const Grid* const>(grads));
            estimate = std::move(y);  // pre-update prediction feeds the next stage
        }

        std::size_t stage = 1;
        for (int level = bands_ - 2; level >= 0; --level, ++stage) {
            const auto [h, w] = level_dims_[static_cast<std::size_t>(level)];
            const auto [ch, cw] = level_dims_[static_cast<std::size_t>(level + 1)];
            const Grid up_est = up_batch(estimate, ch, cw, h, w);
            const Grid up_clean = up_batch(clean_levels[static_cast<std::size_t>(level + 1)],
                                           ch, cw, h, w);
            const Grid residual_target =
                sub(clean_levels[static_cast<std::size_t>(level)], up_clean);
            const Grid input = hconcat(up_est, noisy_levels[static_cast<std::size_t>(level)]);
            auto [r_hat, cache] = mlp_forward(models_[stage], input);
            auto [loss, d_r] = loss_mse(r_hat, residual_target);
            (void)loss;
            const GradReport g = mlp_backward(models_[stage], cache, d_r, false);
            sq_norm += g.global_grad_norm * g.global_grad_norm;
            auto params = models_[stage].params();
            const auto grads = g.params();
            opts_[stage].step(std::span<Grid* const>(params),
                              std::span<const Grid* const>(grads));
            estimate = add(up_est, r_hat);
        }
        grad_norms_.push_back(std::sqrt(sq_norm));
    }

    Grid predict_pixels(const Grid& x_noisy) const override {
        std::vector<Grid> noisy_levels{x_noisy};
        for (int level = 1; level < bands_; ++level) {
            const auto [ph, pw] = level_dims_[static_cast<std::size_t>(level - 1)];
            noisy_levels.push_back(down_batch(noisy_levels.back(), ph, pw));
        }
        Grid estimate = mlp_forward(models_[0], noisy_levels.back()).first;
        std::size_t stage = 1;
        for (int level = bands_ - 2; level >= 0; --level, ++stage) {
            const auto [h, w] = level_dims_[static_cast<std::size_t>(level)];
            const auto [ch, cw] = level_dims_[static_cast<std::size_t>(level + 1)];
            const Grid up_est = up_batch(estimate, ch, cw, h, w);
            const Grid input = hconcat(up_est, noisy_levels[static_cast<std::size_t>(level)]);
            const Grid r_hat = mlp_forward(models_[stage], input).first;
            estimate = add(up_est, r_hat);
        }
        return estimate;
    }

    // Final-band residual prediction for HF-PSNR: the finest stage's output,
    // or the extracted band of the estimate for the single-shot case.
    Grid predict_finest_residual(const Grid& x_noisy) const {
        const Grid full = predict_pixels(x_noisy);
        const auto [h, w] = level_dims_[0];
        const Grid coarse = down_batch(full, h, w);
        return sub(full, up_batch(coarse, (h + 1) / 2, (w + 1) / 2, h, w));
    }

    std::size_t param_count() const override {
        std::size_t total = 0;
        for (const auto& m : models_) total += m.param_count();
        return total;
    }

    const std::vector<std::pair<std::size_t, std::size_t>>& stage_in_out() const {
        return stage_in_out_;
    }

private:
    int bands_;
    std::vector<std::pair<std::size_t, std::size_t>> level_dims_;   // per level h,w
    std::vector<std::pair<std::size_t, std::size_t>> stage_in_out_;  // per stage in,out
    std::vector<MlpModel> models_;
    std::vector<AdamW> opts_;
};

struct ArmRun {
    std::vector<double> test_mse_trace;  // per epoch, on the frozen noisy test set
    double mean_epoch_seconds = 0.0;
    Grid final_pred;  // predictions on the frozen noisy test set
};

// Shared training loop: identical batch order and identical noise for every
// arm, per-epoch test evaluation, per-arm wall-clock on the training work.
std::vector<ArmRun> run_arms(const ExperimentConfig& cfg, std::vector<Arm*>& arms,
                             const Grid& flat_train, const Grid& flat_test,
                             const Grid& noisy_test, const RngStream& master) {
    const Batcher batcher(flat_train.dim(0), cfg.batch, master.substream(kRoleShuffle));
    const RngStream noise_base = master.substream(kRoleTrainNoise);

    std::vector<ArmRun> runs(arms.size());
    std::vector<double> train_seconds(arms.size(), 0.0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto batches = batcher.epoch(static_cast<std::uint64_t>(epoch));
        RngStream epoch_noise = noise_base.substream(static_cast<std::uint64_t>(epoch));
        for (std::size_t b = 0; b < batches.size(); ++b) {
            const Grid x_clean = gather_rows(flat_train, batches[b]);
            RngStream batch_noise = epoch_noise.substream(b);
            const Grid x_noisy = add_noise(x_clean, cfg.sigma_train, batch_noise);
            for (std::size_t a = 0; a < arms.size(); ++a) {
                const auto t0 = Clock::now();
                arms[a]->train_batch(batches[b], x_clean, x_noisy);
                train_seconds[a] += seconds_since(t0);
            }
        }
        for (std::size_t a = 0; a < arms.size(); ++a) {
            Grid pred = arms[a]->predict_pixels(noisy_test);
            runs[a].test_mse_trace.push_back(mse(pred, flat_test));
            if (epoch == cfg.epochs - 1) runs[a].final_pred = std::move(pred);
        }
    }
    for (std::size_t a = 0; a < arms.size(); ++a) {
        runs[a].mean_epoch_seconds = train_seconds[a] / std::max(1, cfg.epochs);
    }
    return runs;
}

struct LoadedData {
    Grid flat_train;  // N x 784
    Grid flat_test;   // M x 784
    std::size_t img_h = 28, img_w = 28;
};

LoadedData load_flat(const ExperimentConfig& cfg) {
    const std::string dir = resolve_data_dir(cfg.data_dir);
    if (dir.empty()) {
        throw input_error(
            "no data directory: pass --data-dir or set REFINERY_DATA_DIR "
            "(see scripts/fetch_mnist.sh or `refinery synth-data`)");
    }
    const Dataset train = load_dataset(dir, "train");
    const Dataset test = load_dataset(dir, "test");
    LoadedData d;
    d.img_h = train.images.dim(1);
    d.img_w = train.images.dim(2);
    d.flat_train = flatten_examples(train.images);
    d.flat_test = flatten_examples(test.images);
    return d;
}

Grid frozen_noisy(const Grid& flat, double sigma, const RngStream& master, std::uint64_t role) {
    RngStream rng = master.substream(role);
    return add_noise(flat, sigma, rng);
}

RunReport new_report(const ExperimentConfig& cfg) {
    RunReport r;
    r.setup = cfg.setup;
    r.seeds = cfg.seeds;
    r.config_hash = cfg.hash();
    r.code_version = kCodeVersion;
    return r;
}

void add_trace(RunReport& report, const std::string& name, std::uint64_t seed,
               const std::vector<double>& values) {
    report.traces[name + "/seed" + std::to_string(seed)] = values;
}

}  // namespace

// ------------------------------------------------------------------ Setup A

RunReport run_setup_a(const ExperimentConfig& cfg) {
    const LoadedData data = load_flat(cfg);
    RunReport report = new_report(cfg);

    std::vector<double> m_pixel_020, m_latent_020, m_pixel_psnr, m_latent_psnr;
    std::vector<double> m_pixel_epochs, m_latent_epochs, m_pixel_030, m_latent_030;
    std::vector<double> t_pixel, t_latent;

    for (const std::uint64_t seed : cfg.seeds) {
        const RngStream master(seed);
        RngStream ae_rng = master.substream(kRoleAeInit);
        const LinearAutoencoder ae = train_linear_ae(data.flat_train, cfg, ae_rng);

        const Grid noisy_test =
            frozen_noisy(data.flat_test, cfg.sigma_train, master, kRoleTestNoiseTrain);
        const Grid noisy_test_shift =
            frozen_noisy(data.flat_test, cfg.sigma_shift, master, kRoleTestNoiseShift);

        PixelArm pixel("pixel", data.flat_train.dim(1), cfg.hidden,
                       AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8},
                       master.substream(kRoleArmInit + 0));
        LatentArm latent("latent", ae, cfg.hidden,
                         AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8},
                         master.substream(kRoleArmInit + 1));
        std::vector<Arm*> arms{&pixel, &latent};
        const std::vector<ArmRun> runs =
            run_arms(cfg, arms, data.flat_train, data.flat_test, noisy_test, master);

        m_pixel_020.push_back(runs[0].test_mse_trace.back());
        m_latent_020.push_back(runs[1].test_mse_trace.back());
        m_pixel_psnr.push_back(mean_psnr(runs[0].final_pred, data.flat_test));
        m_latent_psnr.push_back(mean_psnr(runs[1].final_pred, data.flat_test));
        m_pixel_epochs.push_back(epochs_to_target(runs[0].test_mse_trace, cfg.mse_target));
        m_latent_epochs.push_back(epochs_to_target(runs[1].test_mse_trace, cfg.mse_target));
        m_pixel_030.push_back(mse(pixel.predict_pixels(noisy_test_shift), data.flat_test));
        m_latent_030.push_back(mse(latent.predict_pixels(noisy_test_shift), data.flat_test));
        t_pixel.push_back(runs[0].mean_epoch_seconds);
        t_latent.push_back(runs[1].mean_epoch_seconds);

        add_trace(report, "test_mse/pixel", seed, runs[0].test_mse_trace);
        add_trace(report, "test_mse/latent", seed, runs[1].test_mse_trace);
    }

    report.add_metric("mse_sigma020/pixel", m_pixel_020);
    report.add_metric("mse_sigma020/latent", m_latent_020);
    report.add_metric("psnr/pixel", m_pixel_psnr);
    report.add_metric("psnr/latent", m_latent_psnr);
    report.add_metric("epochs_to_target/pixel", m_pixel_epochs);
    report.add_metric("epochs_to_target/latent", m_latent_epochs);
    report.add_metric("mse_sigma030/pixel", m_pixel_030);
    report.add_metric("mse_sigma030/latent", m_latent_030);
    report.add_timing_metric("seconds_per_epoch/pixel", t_pixel);
    report.add_timing_metric("seconds_per_epoch/latent", t_latent);
    return report;
}

// ------------------------------------------------------------------ Setup B

RunReport run_setup_b(const ExperimentConfig& cfg) {
    const LoadedData data = load_flat(cfg);
    RunReport report = new_report(cfg);

    std::vector<double> m_reg, m_soft, m_bit;
    std::vector<double> v_reg, v_soft, v_bit;
    std::vector<double> t_reg, t_soft, t_bit;
    std::vector<double> p_reg, p_soft, p_bit;

    for (const std::uint64_t seed : cfg.seeds) {
        const RngStream master(seed);
        RngStream ae_rng = master.substream(kRoleAeInit);
        const LinearAutoencoder ae = train_linear_ae(data.flat_train, cfg, ae_rng);

        const Grid z_train = ae.encode(data.flat_train);
        RngStream km_rng = master.substream(kRoleKmeans);
        Codebook cb = kmeans_fit(z_train, cfg.codebook_k, km_rng);
        RngStream bit_rng = master.substream(kRoleBitCodes);
        cb = assign_bit_codes(std::move(cb), bit_rng);
        const std::vector<std::int32_t> labels = vq_assign(cb, z_train);

        const Grid noisy_test =
            frozen_noisy(data.flat_test, cfg.sigma_train, master, kRoleTestNoiseTrain);

        const AdamWConfig adamw{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8};
        LatentArm reg("regression", ae, cfg.hidden, adamw, master.substream(kRoleArmInit + 0),
                      &cb);
        SoftmaxArm soft("softmax64", ae, cb, labels, cfg.hidden, adamw,
                        master.substream(kRoleArmInit + 1));
        BitwiseArm bit("bitwise8", ae, cb, labels, cfg.hidden, adamw,
                       master.substream(kRoleArmInit + 2));
        std::vector<Arm*> arms{&reg, &soft, &bit};
        const std::vector<ArmRun> runs =
            run_arms(cfg, arms, data.flat_train, data.flat_test, noisy_test, master);

        m_reg.push_back(runs[0].test_mse_trace.back());
        m_soft.push_back(runs[1].test_mse_trace.back());
        m_bit.push_back(runs[2].test_mse_trace.back());
        v_reg.push_back(grad_norm_variance(reg.grad_norms()));
        v_soft.push_back(grad_norm_variance(soft.grad_norms()));
        v_bit.push_back(grad_norm_variance(bit.grad_norms()));
        t_reg.push_back(runs[0].mean_epoch_seconds);
        t_soft.push_back(runs[1].mean_epoch_seconds);
        t_bit.push_back(runs[2].mean_epoch_seconds);
        p_reg.push_back(static_cast<double>(reg.param_count()));
        p_soft.push_back(static_cast<double>(soft.param_count()));
        p_bit.push_back(static_cast<double>(bit.param_count()));

        add_trace(report, "test_mse/regression", seed, runs[0].test_mse_trace);
        add_trace(report, "test_mse/softmax64", seed, runs[1].test_mse_trace);
        add_trace(report, "test_mse/bitwise8", seed, runs[2].test_mse_trace);
    }

    report.add_metric("dequantized_mse/regression", m_reg);
    report.add_metric("dequantized_mse/softmax64", m_soft);
    report.add_metric("dequantized_mse/bitwise8", m_bit);
    report.add_metric("grad_norm_variance/regression", v_reg);
    report.add_metric("grad_norm_variance/softmax64", v_soft);
    report.add_metric("grad_norm_variance/bitwise8", v_bit);
    report.add_metric("param_count/regression", p_reg);
    report.add_metric("param_count/softmax64", p_soft);
    report.add_metric("param_count/bitwise8", p_bit);
    report.add_timing_metric("seconds_per_epoch/regression", t_reg);
    report.add_timing_metric("seconds_per_epoch/softmax64", t_soft);
    report.add_timing_metric("seconds_per_epoch/bitwise8", t_bit);
    {
        std::vector<double> rel_soft(t_soft.size()), rel_bit(t_bit.size());
        for (std::size_t i = 0; i < t_soft.size(); ++i) {
            rel_soft[i] = t_soft[i] / t_reg[i];
            rel_bit[i] = t_bit[i] / t_reg[i];
        }
        report.add_timing_metric("rel_time_per_epoch/softmax64", rel_soft);
        report.add_timing_metric("rel_time_per_epoch/bitwise8", rel_bit);
    }
    return report;
}

// --------------------------------------------------- Setup C and depth sweep

namespace {

RunReport run_banded(const ExperimentConfig& cfg, const std::vector<int>& band_counts,
                     const std::vector<std::string>& arm_names, bool hf_psnr_metrics) {
    const LoadedData data = load_flat(cfg);
    RunReport report = new_report(cfg);

    const std::size_t n_arms = band_counts.size();
    std::vector<std::vector<double>> m_mse(n_arms), m_epochs(n_arms), m_hf(n_arms);
    std::vector<std::vector<double>> t_arm(n_arms), p_arm(n_arms);

    // Reference single-shot parameter count fixes every arm's width.
    const std::size_t dim = data.flat_train.dim(1);
    const std::size_t reference_params =
        dim * cfg.hidden + cfg.hidden * 3 + cfg.hidden * dim + dim;

    for (const std::uint64_t seed : cfg.seeds) {
        const RngStream master(seed);
        const Grid noisy_test =
            frozen_noisy(data.flat_test, cfg.sigma_train, master, kRoleTestNoiseTrain);

        std::vector<std::unique_ptr<BandedArm>> owned;
        std::vector<Arm*> arms;
        const AdamWConfig adamw{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8};
        for (std::size_t a = 0; a < n_arms; ++a) {
            // Probe stage shapes with a throwaway width, then solve for the
            // width matching the single-shot reference.
            std::size_t width = cfg.hidden;
            if (band_counts[a] != 1) {
                RngStream probe_rng(0);
                BandedArm probe("probe", band_counts[a], data.img_h, data.img_w, 1, adamw,
                                probe_rng);
                width = matched_hidden_width(probe.stage_in_out(), reference_params);
            }
            owned.push_back(std::make_unique<BandedArm>(arm_names[a], band_counts[a], data.img_h,
                                                        data.img_w, width, adamw,
                                                        master.substream(kRoleArmInit + static_cast<std::uint64_t>(a))));
            const double mismatch =
                std::abs(static_cast<double>(owned.back()->param_count()) -
                         static_cast<double>(reference_params)) /
                static_cast<double>(reference_params);
            if (mismatch > 0.01) {
                throw state_error("banded arm parameter count missed the 1% match window");
            }
            arms.push_back(owned.back().get());
        }

        const std::vector<ArmRun> runs =
            run_arms(cfg, arms, data.flat_train, data.flat_test, noisy_test, master);

        // True finest residual band of the clean test set.
        Grid true_r0;
        if (hf_psnr_metrics) {
            const Grid coarse = down_batch(data.flat_test, data.img_h, data.img_w);
            true_r0 = sub(data.flat_test,
                          up_batch(coarse, (data.img_h + 1) / 2, (data.img_w + 1) / 2,
                                   data.img_h, data.img_w));
        }

        for (std::size_t a = 0; a < n_arms; ++a) {
            m_mse[a].push_back(runs[a].test_mse_trace.back());
            m_epochs[a].push_back(epochs_to_target(runs[a].test_mse_trace, cfg.mse_target));
            t_arm[a].push_back(runs[a].mean_epoch_seconds);
            p_arm[a].push_back(static_cast<double>(arms[a]->param_count()));
            if (hf_psnr_metrics) {
                const Grid pred_r0 = owned[a]->predict_finest_residual(noisy_test);
                m_hf[a].push_back(mean_psnr(pred_r0, true_r0));
            }
            add_trace(report, "test_mse/" + arm_names[a], seed, runs[a].test_mse_trace);
        }
    }

    for (std::size_t a = 0; a < n_arms; ++a) {
        report.add_metric("mse/" + arm_names[a], m_mse[a]);
        report.add_metric("epochs_to_target/" + arm_names[a], m_epochs[a]);
        if (hf_psnr_metrics) report.add_metric("hf_psnr/" + arm_names[a], m_hf[a]);
        report.add_metric("param_count/" + arm_names[a], p_arm[a]);
        report.add_timing_metric("seconds_per_epoch/" + arm_names[a], t_arm[a]);
    }
    // Relative time normalized to the first arm.
    for (std::size_t a = 1; a < n_arms; ++a) {
        std::vector<double> rel(t_arm[a].size());
        for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = t_arm[a][i] / t_arm[0][i];
        report.add_timing_metric("rel_time_per_epoch/" + arm_names[a], rel);
    }
    return report;
}

}  // namespace

RunReport run_setup_c(const ExperimentConfig& cfg) {
    return run_banded(cfg, {1, 2}, {"single_shot", "two_stage"}, true);
}

RunReport run_depth_sweep(const ExperimentConfig& cfg) {
    std::vector<std::string> names;
    names.reserve(cfg.depth_values.size());
    for (int s : cfg.depth_values) names.push_back("s" + std::to_string(s));
    return run_banded(cfg, cfg.depth_values, names, false);
}

// ----------------------------------------------------------- generation demo

namespace {

struct RefineryDemoResult {
    RefineryModel model;
    std::vector<double> nll_trace;
    double test_nll_per_site = 0.0;
    Grid samples;  // sample_count x 784
    double seconds_per_sample = 0.0;
    int stages = 0;
};

RefineryDemoResult train_and_sample_refinery(const ExperimentConfig& cfg, const LoadedData& data,
                                             const RngStream& master) {
    const std::size_t n_train = std::min(cfg.demo_train_limit, data.flat_train.dim(0));
    const int s = cfg.refinery_scales;

    // Latents of the training subset.
    std::vector<LatentGrid> latents;
    latents.reserve(n_train);
    for (std::size_t i = 0; i < n_train; ++i) {
        Grid img({data.img_h, data.img_w});
        std::copy(data.flat_train.data() + i * img.size(),
                  data.flat_train.data() + (i + 1) * img.size(), img.data());
        latents.push_back(patch_embed(img));
    }
    const std::size_t d = latents.front().channels();

    // Residual and base vectors for codebook fitting, capped per level.
    constexpr std::size_t kFitCap = 200000;
    std::vector<Grid> level_rows;  // per level residual rows
    Grid base_rows;
    {
        std::vector<std::vector<double>> res_buf(static_cast<std::size_t>(s));
        std::vector<double> base_buf;
        for (const LatentGrid& lat : latents) {
            std::vector<Grid> levels{lat.values};
            for (int k = 1; k <= s; ++k) levels.push_back(down(levels.back()));
            for (int k = 1; k <= s; ++k) {
                const std::size_t level = static_cast<std::size_t>(k - 1);
                const Grid& fine = levels[level];
                const Grid residual =
                    sub(fine, up(levels[static_cast<std::size_t>(k)], fine.dim(0), fine.dim(1)));
                if (res_buf[level].size() < kFitCap * d) {
                    res_buf[level].insert(res_buf[level].end(), residual.data(),
                                          residual.data() + residual.size());
                }
            }
            const Grid& base = levels.back();
            if (base_buf.size() < kFitCap * d) {
                base_buf.insert(base_buf.end(), base.data(), base.data() + base.size());
            }
        }
        for (int level = 0; level < s; ++level) {
            auto& buf = res_buf[static_cast<std::size_t>(level)];
            const std::size_t rows = buf.size() / d;
            level_rows.push_back(Grid({rows, d}, std::move(buf)));
        }
        const std::size_t base_count = base_buf.size() / d;
        base_rows = Grid({base_count, d}, std::move(base_buf));
    }

    RngStream km_rng = master.substream(kRoleKmeans);
    std::vector<Codebook> res_cbs;
    for (int level = 0; level < s; ++level) {
        RngStream level_rng = km_rng.substream(static_cast<std::uint64_t>(level));
        res_cbs.push_back(
            kmeans_fit(level_rows[static_cast<std::size_t>(level)], cfg.codebook_k, level_rng));
    }
    RngStream base_rng = km_rng.substream(1000);
    Codebook base_cb = kmeans_fit(base_rows, cfg.codebook_k, base_rng);

    RngStream init_rng = master.substream(kRoleRefineryInit);
    RefineryDemoResult out{
        make_refinery_model(s, d, latents.front().height(), latents.front().width(),
                            std::move(base_cb), std::move(res_cbs), cfg.refinery_hidden,
                            init_rng),
        {}, 0.0, {}, 0.0, 0};

    std::vector<TokenPyramid> tokens;
    tokens.reserve(n_train);
    for (const LatentGrid& lat : latents) tokens.push_back(forward_tokenize(out.model, lat));

    RngStream train_rng = master.substream(kRoleRefineryTrain);
    RefineryTrainOptions opts;
    opts.epochs = cfg.demo_epochs;
    opts.batch_images = 64;
    opts.adamw = AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8};
    out.nll_trace = train_refinery(out.model, tokens, opts, train_rng);

    // Teacher-forced NLL on the test set.
    {
        double total = 0.0;
        std::size_t sites = 0;
        const std::size_t n_test = data.flat_test.dim(0);
        for (std::size_t i = 0; i < n_test; ++i) {
            Grid img({data.img_h, data.img_w});
            std::copy(data.flat_test.data() + i * img.size(),
                      data.flat_test.data() + (i + 1) * img.size(), img.data());
            const TokenPyramid t = forward_tokenize(out.model, patch_embed(img));
            total -= log_likelihood(out.model, t);
            sites += t.total_sites();
        }
        out.test_nll_per_site = total / static_cast<double>(sites);
    }

    // Single-sample generation, timed per sample.
    RngStream sample_rng = master.substream(kRoleRefinerySample);
    out.samples = Grid({cfg.sample_count, data.img_h * data.img_w});
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < cfg.sample_count; ++i) {
        GenerateResult g = generate(out.model, sample_rng, cfg.temperature);
        out.stages = g.stages;
        std::copy(g.pixels.data(), g.pixels.data() + g.pixels.size(),
                  out.samples.data() + i * g.pixels.size());
    }
    out.seconds_per_sample = seconds_since(t0) / static_cast<double>(cfg.sample_count);
    return out;
}

struct DdpmDemoResult {
    std::vector<double> loss_trace;
    Grid samples;
    double seconds_per_sample = 0.0;
    int steps = 0;
};

DdpmDemoResult train_and_sample_ddpm(const ExperimentConfig& cfg, const LoadedData& data,
                                     const RngStream& master) {
    const std::size_t n_train = std::min(cfg.demo_train_limit, data.flat_train.dim(0));
    const std::size_t dim = data.flat_train.dim(1);
    const NoiseSchedule sched =
        make_linear_schedule(cfg.ddpm_steps, cfg.ddpm_beta_start, cfg.ddpm_beta_end);

    RngStream init_rng = master.substream(kRoleDdpmInit);
    MlpModel model = MlpModel::init({dim + kTimeFeatureDim, cfg.hidden, dim}, init_rng);
    const auto p = model.params();
    AdamW opt(std::span<const Grid* const>(p),
              AdamWConfig{cfg.lr, cfg.weight_decay, 0.9, 0.999, 1e-8});

    std::vector<std::size_t> subset(n_train);
    for (std::size_t i = 0; i < n_train; ++i) subset[i] = i;
    const Grid train = gather_rows(data.flat_train, subset);

    RngStream train_rng = master.substream(kRoleDdpmTrain);
    const Batcher batcher(n_train, cfg.batch, train_rng.substream(kRoleShuffle));
    DdpmDemoResult out;
    for (int epoch = 0; epoch < cfg.demo_epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t batches = 0;
        RngStream epoch_rng = train_rng.substream(1000 + static_cast<std::uint64_t>(epoch));
        for (const auto& idx : batcher.epoch(static_cast<std::uint64_t>(epoch))) {
            const Grid x0 = gather_rows(train, idx);
            loss_sum += ddpm_train_step(model, opt, x0, epoch_rng, sched);
            ++batches;
        }
        out.loss_trace.push_back(loss_sum / static_cast<double>(batches));
    }

    // Single-sample generation, timed per sample.
    RngStream sample_rng = master.substream(kRoleDdpmSample);
    out.samples = Grid({cfg.sample_count, dim});
    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < cfg.sample_count; ++i) {
        const DdpmSampleResult s = ddpm_sample(model, sample_rng, sched, 1);
        out.steps = s.network_evals;
        std::copy(s.samples.data(), s.samples.data() + dim, out.samples.data() + i * dim);
    }
    out.seconds_per_sample = seconds_since(t0) / static_cast<double>(cfg.sample_count);
    return out;
}

}  // namespace

RunReport run_refinery_demo(const ExperimentConfig& cfg) {
    const LoadedData data = load_flat(cfg);
    RunReport report = new_report(cfg);
    const std::uint64_t seed = cfg.seeds.empty() ? 0 : cfg.seeds.front();
    const RngStream master(seed);

    const RefineryDemoResult ref = train_and_sample_refinery(cfg, data, master);
    const DdpmDemoResult ddpm = train_and_sample_ddpm(cfg, data, master);

    report.add_metric("refinery_stages", {static_cast<double>(ref.stages)});
    report.add_metric("ddpm_steps", {static_cast<double>(ddpm.steps)});
    report.add_metric("refinery_test_nll_per_site", {ref.test_nll_per_site});
    report.add_metric("refinery_train_nll_first_epoch", {ref.nll_trace.front()});
    report.add_metric("refinery_train_nll_last_epoch", {ref.nll_trace.back()});
    report.add_timing_metric("seconds_per_sample/refinery", {ref.seconds_per_sample});
    report.add_timing_metric("seconds_per_sample/ddpm", {ddpm.seconds_per_sample});
    report.add_timing_metric("wallclock_ratio_ddpm_over_refinery",
                             {ddpm.seconds_per_sample / ref.seconds_per_sample});
    report.traces["train_nll/refinery/seed" + std::to_string(seed)] = ref.nll_trace;
    report.traces["train_loss/ddpm/seed" + std::to_string(seed)] = ddpm.loss_trace;

    // Side-by-side sheet: refinery left, ddpm right, 8 tiles per panel row.
    const std::size_t n = std::min<std::size_t>(cfg.sample_count, 64);
    const std::size_t panel_rows = (n + 7) / 8;
    Grid sheet({16 * panel_rows, data.img_h * data.img_w});
    for (std::size_t row = 0; row < panel_rows; ++row) {
        for (std::size_t col = 0; col < 8; ++col) {
            const std::size_t i = row * 8 + col;
            if (i >= n) break;
            std::copy(ref.samples.data() + i * sheet.dim(1),
                      ref.samples.data() + (i + 1) * sheet.dim(1),
                      sheet.data() + (row * 16 + col) * sheet.dim(1));
            std::copy(ddpm.samples.data() + i * sheet.dim(1),
                      ddpm.samples.data() + (i + 1) * sheet.dim(1),
                      sheet.data() + (row * 16 + 8 + col) * sheet.dim(1));
        }
    }
    std::filesystem::create_directories(cfg.out_dir);
    write_pgm_sheet(cfg.out_dir + "/samples.pgm", sheet, data.img_h, data.img_w, 16);
    save_refinery_model(cfg.out_dir + "/refinery_model.rfny", ref.model);
    return report;
}

RunReport run_ddpm_demo(const ExperimentConfig& cfg) {
    const LoadedData data = load_flat(cfg);
    RunReport report = new_report(cfg);
    const std::uint64_t seed = cfg.seeds.empty() ? 0 : cfg.seeds.front();
    const RngStream master(seed);

    const DdpmDemoResult ddpm = train_and_sample_ddpm(cfg, data, master);
    report.add_metric("ddpm_steps", {static_cast<double>(ddpm.steps)});
    report.add_metric("train_loss_first_epoch", {ddpm.loss_trace.front()});
    report.add_metric("train_loss_last_epoch", {ddpm.loss_trace.back()});
    report.add_timing_metric("seconds_per_sample/ddpm", {ddpm.seconds_per_sample});
    report.traces["train_loss/ddpm/seed" + std::to_string(seed)] = ddpm.loss_trace;

    std::filesystem::create_directories(cfg.out_dir);
    write_pgm_sheet(cfg.out_dir + "/samples.pgm", ddpm.samples, data.img_h, data.img_w, 8);
    return report;
}

RunReport run_setup(const ExperimentConfig& cfg) {
    if (cfg.setup == "A") return run_setup_a(cfg);
    if (cfg.setup == "B") return run_setup_b(cfg);
    if (cfg.setup == "C") return run_setup_c(cfg);
    if (cfg.setup == "depth") return run_depth_sweep(cfg);
    if (cfg.setup == "refinery") return run_refinery_demo(cfg);
    if (cfg.setup == "ddpm") return run_ddpm_demo(cfg);
    throw input_error("unknown setup '" + cfg.setup + "' (want A|B|C|depth|refinery|ddpm)");
}

}  // namespace refinery
