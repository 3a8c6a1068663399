// MNIST-style IDX ingestion, pixel normalization, Gaussian noise injection,
// and deterministic epoch shuffling. Files may be raw or gzip-compressed;
// nothing is ever downloaded here.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refinery/grid.hpp"
#include "refinery/rng.hpp"

namespace refinery {

struct Dataset {
    Grid images;                      // N x H x W, values in [0, 1]
    std::vector<std::int32_t> labels; // length N
    std::string split;                // "train" or "test"

    std::size_t count() const { return images.empty() ? 0 : images.dim(0); }
};

// IDX image file (magic 0x00000803): bytes scaled by 1/255.
Grid load_idx_images(const std::string& path);

// IDX label file (magic 0x00000801).
std::vector<std::int32_t> load_idx_labels(const std::string& path);

// Loads the canonical filename pair for a split from a directory,
// transparently accepting .gz variants. split is "train" or "test".
Dataset load_dataset(const std::string& dir, const std::string& split);

// Resolution order for the data directory: explicit flag value, then the
// REFINERY_DATA_DIR environment variable. Empty if neither is set.
std::string resolve_data_dir(const std::string& flag_value);

// Writers for fixtures and round-trip checks; always big-endian IDX.
void write_idx_images(const std::string& path, const Grid& images);
void write_idx_labels(const std::string& path, const std::vector<std::int32_t>& labels);

// x + sigma * eps with eps standard normal; intentionally not clamped.
Grid add_noise(const Grid& x, double sigma, RngStream& rng);

// Epoch-wise shuffled mini-batch index plan: a fresh permutation per epoch,
// deterministic per (rng identity, epoch); the last partial batch is kept.
class Batcher {
public:
    Batcher(std::size_t n, std::size_t batch_size, const RngStream& rng);

    std::vector<std::vector<std::size_t>> epoch(std::uint64_t epoch_index) const;

    std::size_t batch_size() const { return batch_size_; }

private:
    std::size_t n_;
    std::size_t batch_size_;
    RngStream base_;
};

// Rows `idx` of an N x ... grid gathered into a B x (product of the rest)
// matrix -- the batch layout the MLPs consume.
Grid gather_rows(const Grid& examples, const std::vector<std::size_t>& idx);

// N x H x W -> N x (H*W).
Grid flatten_examples(const Grid& images);

}  // namespace refinery
