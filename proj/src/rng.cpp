#include "refinery/rng.hpp"

#include <cmath>
#include <numbers>

#include "refinery/error.hpp"

namespace refinery {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

// splitmix64 finalizer (Steele, Lea, Flood 2014).
std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

std::uint64_t derive_state(std::uint64_t seed, std::uint64_t stream_id) {
    return mix64(mix64(seed + kGolden) ^ mix64(stream_id * kGolden + 1));
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id), state_(derive_state(seed, stream_id)) {}

std::uint64_t RngStream::next_u64() {
    state_ += kGolden;
    return mix64(state_);
}

double RngStream::uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // u1 in (0, 1] so log is finite; u2 in [0, 1).
    const double u1 = 1.0 - uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
}

std::uint64_t RngStream::below(std::uint64_t n) {
    if (n == 0) throw input_error("RngStream::below: n must be >= 1");
    if (n == 1) return 0;
    std::uint64_t mask = ~std::uint64_t{0} >> __builtin_clzll(n - 1);
    for (;;) {
        const std::uint64_t v = next_u64() & mask;
        if (v < n) return v;
    }
}

RngStream RngStream::substream(std::uint64_t id) const {
    return RngStream(seed_, mix64(stream_id_ * kGolden + 0x51ED2701) ^ mix64(id + kGolden));
}

Grid randn(RngStream& rng, std::vector<std::size_t> shape) {
    if (shape.empty()) throw input_error("randn: shape must be nonempty");
    Grid g(std::move(shape));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = rng.normal();
    return g;
}

std::vector<std::size_t> random_permutation(std::size_t n, RngStream& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.below(i));
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace refinery
