// Gaussian/Laplacian pyramid with the fixed separable [1,4,6,4,1]/16 blur.
// Analysis: G_{k+1} = down(G_k), L_k = G_k - up(G_{k+1}).
// Synthesis: upsample-and-add, which reconstructs the input exactly.
//
// Grids are H x W or H x W x C (filtering runs per channel). Borders use
// reflect-101 so constants are preserved everywhere, including edges.
#pragma once

#include <vector>

#include "refinery/grid.hpp"

namespace refinery {

// Separable [1,4,6,4,1]/16 blur, horizontal then vertical.
Grid blur(const Grid& img);

// Blur then keep even-indexed rows/cols; output dims ceil(H/2) x ceil(W/2).
Grid down(const Grid& img);

// Zero-stuff to target dims (samples at even indices), then blur with the
// gain-2 synthesis kernel [2,8,12,8,2]/16. target must be 2h-1..2h x 2w-1..2w.
Grid up(const Grid& img, std::size_t target_h, std::size_t target_w);

struct Pyramid {
    std::vector<Grid> gaussians;   // G_0..G_S, original first
    std::vector<Grid> laplacians;  // L_0..L_{S-1}
    Grid base;                     // G_S
};

// Decompose into `levels` Laplacian bands plus the coarsest Gaussian.
// levels >= 1; errors out once a level can no longer shrink (1x1).
Pyramid pyramid_build(const Grid& img, int levels);

// upsample-and-add synthesis; returns the reconstructed G_0.
Grid pyramid_reconstruct(const Pyramid& p);

}  // namespace refinery
