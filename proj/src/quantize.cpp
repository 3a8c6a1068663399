#include "refinery/quantize.hpp"

#include <bit>
#include <cassert>
#include <cmath>
#include <limits>

#include "refinery/error.hpp"

namespace refinery {

namespace {

void require_points(const Grid& x, const char* op) {
    if (x.rank() != 2) throw dim_error(std::string(op) + ": expected an N x d grid");
}

double sq_dist(const double* a, const double* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = a[i] - b[i];
        acc += diff * diff;
    }
    return acc;
}

// Nearest centroid index and squared distance, lowest index on ties.
std::pair<std::int32_t, double> nearest(const double* p, const Grid& centroids, std::size_t d) {
    const std::size_t k = centroids.dim(0);
    std::int32_t best = 0;
    double best_d = sq_dist(p, centroids.data(), d);
    for (std::size_t j = 1; j < k; ++j) {
        const double dist = sq_dist(p, centroids.data() + j * d, d);
        if (dist < best_d) {
            best_d = dist;
            best = static_cast<std::int32_t>(j);
        }
    }
    return {best, best_d};
}

}  // namespace

Codebook kmeans_fit(const Grid& points, std::size_t k, RngStream& rng,
                    std::vector<double>* sse_trace) {
    require_points(points, "kmeans_fit");
    const std::size_t n = points.dim(0), d = points.dim(1);
    if (k < 1 || n < k) throw input_error("kmeans_fit: need N >= k >= 1");

    // k-means++ seeding.
    Grid centroids({k, d});
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    {
        const std::size_t first = static_cast<std::size_t>(rng.below(n));
        for (std::size_t c = 0; c < d; ++c) centroids[c] = points[first * d + c];
    }
    for (std::size_t j = 1; j < k; ++j) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double dist = sq_dist(points.data() + i * d, centroids.data() + (j - 1) * d, d);
            if (dist < min_d2[i]) min_d2[i] = dist;
            total += min_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double r = rng.uniform01() * total;
            for (std::size_t i = 0; i < n; ++i) {
                r -= min_d2[i];
                if (r <= 0.0) {
                    pick = i;
                    break;
                }
                pick = i;
            }
        } else {
            pick = static_cast<std::size_t>(rng.below(n));
        }
        for (std::size_t c = 0; c < d; ++c) centroids[j * d + c] = points[pick * d + c];
    }

    std::vector<std::int32_t> assignment(n, -1);
    std::vector<std::size_t> counts(k);
    [[maybe_unused]] double prev_sse = std::numeric_limits<double>::infinity();
    for (int iter = 0; iter < 100; ++iter) {
        // Assignment step.
        bool changed = false;
        double sse = 0.0;
        std::vector<double> dist_to_own(n);
        for (std::size_t i = 0; i < n; ++i) {
            auto [idx, dist] = nearest(points.data() + i * d, centroids, d);
            if (idx != assignment[i]) {
                assignment[i] = idx;
                changed = true;
            }
            dist_to_own[i] = dist;
            sse += dist;
        }
        // Lloyd monotonicity; reseeding below can only tighten the next pass.
        assert(sse <= prev_sse * (1.0 + 1e-12) + 1e-12);
        prev_sse = sse;
        if (sse_trace) sse_trace->push_back(sse);
        if (!changed && iter > 0) break;

        // Update step.
        Grid sums({k, d});
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t a = static_cast<std::size_t>(assignment[i]);
            ++counts[a];
            for (std::size_t c = 0; c < d; ++c) sums[a * d + c] += points[i * d + c];
        }
        for (std::size_t j = 0; j < k; ++j) {
            if (counts[j] == 0) {
                // Reseed an empty cluster to the farthest point.
                std::size_t far = 0;
                for (std::size_t i = 1; i < n; ++i) {
                    if (dist_to_own[i] > dist_to_own[far]) far = i;
                }
                for (std::size_t c = 0; c < d; ++c) centroids[j * d + c] = points[far * d + c];
                dist_to_own[far] = 0.0;
            } else {
                const double inv = 1.0 / static_cast<double>(counts[j]);
                for (std::size_t c = 0; c < d; ++c) centroids[j * d + c] = sums[j * d + c] * inv;
            }
        }
    }

    Codebook cb;
    cb.entries = std::move(centroids);
    return cb;
}

std::vector<std::int32_t> vq_assign(const Codebook& cb, const Grid& x) {
    require_points(x, "vq_assign");
    const std::size_t d = x.dim(1);
    if (d != cb.dim()) throw dim_error("vq_assign: point dim does not match codebook");
    const std::size_t n = x.dim(0);
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = nearest(x.data() + i * d, cb.entries, d).first;
    }
    return out;
}

Grid vq_dequantize(const Codebook& cb, const std::vector<std::int32_t>& idx) {
    const std::size_t d = cb.dim();
    Grid out({idx.size(), d});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= cb.count()) {
            throw input_error("vq_dequantize: index out of range");
        }
        const double* e = cb.entries.data() + static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = e[c];
    }
    return out;
}

VqLossResult vq_loss(const Grid& z_e, const Codebook& cb, double beta) {
    require_points(z_e, "vq_loss");
    if (beta < 0.0) throw input_error("vq_loss: beta must be >= 0");
    const std::size_t n = z_e.dim(0), d = z_e.dim(1);
    if (d != cb.dim()) throw dim_error("vq_loss: point dim does not match codebook");

    const std::vector<std::int32_t> idx = vq_assign(cb, z_e);
    const double inv = 1.0 / static_cast<double>(n * d);

    VqLossResult res;
    res.d_z = Grid({n, d});
    res.d_entries = Grid({cb.count(), d});
    double codebook_term = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = static_cast<std::size_t>(idx[i]);
        const double* z = z_e.data() + i * d;
        const double* e = cb.entries.data() + j * d;
        for (std::size_t c = 0; c < d; ++c) {
            const double diff = z[c] - e[c];
            codebook_term += diff * diff;
            // Codebook term moves entries toward sg[z_e].
            res.d_entries[j * d + c] += 2.0 * (e[c] - z[c]) * inv;
            // Commitment term moves z_e toward sg[e].
            res.d_z[i * d + c] = beta * 2.0 * diff * inv;
        }
    }
    codebook_term *= inv;
    res.loss = codebook_term + beta * codebook_term;
    return res;
}

Codebook assign_bit_codes(Codebook cb, RngStream& rng) {
    const std::size_t v = cb.count();
    if (v > 256) throw input_error("assign_bit_codes: codebook exceeds 256 entries");
    // Partial Fisher-Yates over 0..255: first V entries are distinct.
    std::vector<std::uint8_t> pool(256);
    for (std::size_t i = 0; i < 256; ++i) pool[i] = static_cast<std::uint8_t>(i);
    for (std::size_t i = 0; i < v; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(256 - i));
        std::swap(pool[i], pool[j]);
    }
    cb.bit_codes.assign(pool.begin(), pool.begin() + static_cast<long>(v));
    return cb;
}

std::vector<std::int32_t> decode_bits(const Codebook& cb, const Grid& bit_probs) {
    if (!cb.has_bit_codes()) throw state_error("decode_bits: codebook has no bit codes");
    if (bit_probs.rank() != 2 || bit_probs.dim(1) != 8) {
        throw dim_error("decode_bits: expected an N x 8 grid");
    }
    const std::size_t n = bit_probs.dim(0);
    std::vector<std::int32_t> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint8_t byte = 0;
        for (std::size_t b = 0; b < 8; ++b) {
            if (bit_probs[i * 8 + b] >= 0.5) byte |= static_cast<std::uint8_t>(1u << b);
        }
        std::int32_t best = 0;
        int best_dist = std::popcount(static_cast<unsigned>(byte ^ cb.bit_codes[0]));
        for (std::size_t j = 1; j < cb.bit_codes.size(); ++j) {
            const int dist = std::popcount(static_cast<unsigned>(byte ^ cb.bit_codes[j]));
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<std::int32_t>(j);
            }
        }
        out[i] = best;
    }
    return out;
}

std::vector<double> code_word_bits(const Codebook& cb, std::int32_t index) {
    if (!cb.has_bit_codes()) throw state_error("code_word_bits: codebook has no bit codes");
    if (index < 0 || static_cast<std::size_t>(index) >= cb.bit_codes.size()) {
        throw input_error("code_word_bits: index out of range");
    }
    std::vector<double> bits(8);
    const std::uint8_t w = cb.bit_codes[static_cast<std::size_t>(index)];
    for (std::size_t b = 0; b < 8; ++b) bits[b] = (w >> b) & 1u ? 1.0 : 0.0;
    return bits;
}

}  // namespace refinery
