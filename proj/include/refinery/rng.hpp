// Deterministic splittable PRNG. A stream is fully determined by
// (seed, stream_id); substreams are independent without shared state, so
// multi-seed experiments reproduce bit-identically in any execution order.
//
// Core generator: splitmix64 (counter-based, platform-stable).
// Gaussians: Box-Muller with a cached spare.
#pragma once

#include <cstdint>
#include <vector>

#include "refinery/grid.hpp"

namespace refinery {

class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double uniform01();

    // Standard normal via Box-Muller; consumes two uniforms per pair.
    double normal();

    // Uniform integer in [0, n); unbiased via masked rejection. n >= 1.
    std::uint64_t below(std::uint64_t n);

    // Independent child stream; deterministic function of this stream's
    // identity and `id` only (does not consume state).
    RngStream substream(std::uint64_t id) const;

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
    std::uint64_t state_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Grid of i.i.d. standard normal samples, drawn row-major.
Grid randn(RngStream& rng, std::vector<std::size_t> shape);

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> random_permutation(std::size_t n, RngStream& rng);

}  // namespace refinery
