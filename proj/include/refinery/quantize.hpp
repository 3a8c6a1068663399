// Vector quantization: k-means codebook fitting (k-means++ seeding),
// nearest-code assignment, the VQ codebook/commitment loss pair with
// stop-gradient routing, and fixed 8-bit code words for the bitwise head.
#pragma once

#include <cstdint>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/rng.hpp"

namespace refinery {

struct Codebook {
    Grid entries;                         // V x d
    std::vector<std::uint8_t> bit_codes;  // empty, or V distinct bytes

    std::size_t count() const { return entries.dim(0); }
    std::size_t dim() const { return entries.dim(1); }
    bool has_bit_codes() const { return !bit_codes.empty(); }
};

// Lloyd's algorithm with k-means++ seeding. Runs to assignment fixpoint or
// 100 iterations; empty clusters are reseeded to the point farthest from
// its assigned centroid. Requires N >= k >= 1. When sse_trace is given it
// receives the per-iteration SSE (non-increasing by construction).
Codebook kmeans_fit(const Grid& points, std::size_t k, RngStream& rng,
                    std::vector<double>* sse_trace = nullptr);

// Argmin over entries of squared Euclidean distance; ties break to the
// lowest index. x is N x d.
std::vector<std::int32_t> vq_assign(const Codebook& cb, const Grid& x);

// Table lookup of entry rows; indices must lie in [0, V).
Grid vq_dequantize(const Codebook& cb, const std::vector<std::int32_t>& idx);

struct VqLossResult {
    double loss = 0.0;
    Grid d_z;        // gradient w.r.t. z_e (commitment term only)
    Grid d_entries;  // gradient w.r.t. entries (codebook term only)
};

// Codebook term ||sg[z_e] - e||^2 plus beta * commitment ||z_e - sg[e]||^2,
// both as means over N*d, for the assigned entries. The reconstruction term
// of the full VQ objective is composed by the caller.
VqLossResult vq_loss(const Grid& z_e, const Codebook& cb, double beta);

// Assigns V distinct bytes drawn uniformly without replacement from 0..255.
Codebook assign_bit_codes(Codebook cb, RngStream& rng);

// Threshold probabilities at 0.5 to a byte, then map to the valid code word
// of minimum Hamming distance (ties to the lowest codebook index).
// bit_probs is N x 8; bit j corresponds to bit j of the byte (LSB first).
std::vector<std::int32_t> decode_bits(const Codebook& cb, const Grid& bit_probs);

// Bits of entry `index`'s code word as a length-8 {0,1} row (LSB first).
std::vector<double> code_word_bits(const Codebook& cb, std::int32_t index);

}  // namespace refinery
