// Procedurally drawn handwritten-digit corpus in canonical IDX layout, for
// fully offline runs where the real MNIST files are not available. Images
// are 28x28 grayscale in [0,1]: per-class stroke skeletons with random
// affine warp, control-point wobble, stroke width and ink variation.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/grid.hpp"

namespace refinery {

// n digit images (N x 28 x 28) with balanced, shuffled class labels.
// Deterministic per seed.
Grid synth_digit_images(std::size_t n, std::uint64_t seed,
                        std::vector<std::int32_t>* labels_out = nullptr);

// Writes train/test IDX files (plus labels) under `dir` using the canonical
// MNIST filenames. Train and test draw from disjoint substreams.
void write_synth_corpus(const std::string& dir, std::size_t n_train, std::size_t n_test,
                        std::uint64_t seed);

}  // namespace refinery
