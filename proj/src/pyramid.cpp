#include "refinery/pyramid.hpp"

#include <array>
#include <cstddef>

#include "refinery/error.hpp"

namespace refinery {

namespace {

// Reflect-101 fold: mirror about the edge sample without repeating it.
std::size_t fold101(long i, long n) {
    if (n == 1) return 0;
    while (i < 0 || i >= n) {
        if (i < 0) i = -i;
        if (i >= n) i = 2 * n - 2 - i;
    }
    return static_cast<std::size_t>(i);
}

struct ImageDims {
    std::size_t h, w, c;
};

ImageDims image_dims(const Grid& img, const char* op) {
    if (img.rank() == 2) return {img.dim(0), img.dim(1), 1};
    if (img.rank() == 3) return {img.dim(0), img.dim(1), img.dim(2)};
    throw dim_error(std::string(op) + ": expected an HxW or HxWxC grid");
}

Grid make_image(std::size_t h, std::size_t w, std::size_t c, bool has_channel_axis) {
    if (has_channel_axis) return Grid({h, w, c});
    return Grid({h, w});
}

// Separable 5-tap convolution, horizontal then vertical, reflect-101.
Grid separable5(const Grid& img, const std::array<double, 5>& k) {
    const ImageDims d = image_dims(img, "blur");
    const long h = static_cast<long>(d.h), w = static_cast<long>(d.w);
    const std::size_t c = d.c;

    Grid tmp(img.shape());
    const double* src = img.data();
    double* t = tmp.data();
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int tap = -2; tap <= 2; ++tap) {
                    const std::size_t xx = fold101(x + tap, w);
                    acc += k[tap + 2] * src[(static_cast<std::size_t>(y) * d.w + xx) * c + ch];
                }
                t[(static_cast<std::size_t>(y) * d.w + static_cast<std::size_t>(x)) * c + ch] = acc;
            }
        }
    }

    Grid out(img.shape());
    double* o = out.data();
    for (long y = 0; y < h; ++y) {
        for (long x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double acc = 0.0;
                for (int tap = -2; tap <= 2; ++tap) {
                    const std::size_t yy = fold101(y + tap, h);
                    acc += k[tap + 2] * t[(yy * d.w + static_cast<std::size_t>(x)) * c + ch];
                }
                o[(static_cast<std::size_t>(y) * d.w + static_cast<std::size_t>(x)) * c + ch] = acc;
            }
        }
    }
    return out;
}

constexpr std::array<double, 5> kAnalysis = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
constexpr std::array<double, 5> kSynthesis = {2.0 / 16, 8.0 / 16, 12.0 / 16, 8.0 / 16, 2.0 / 16};

}  // namespace

Grid blur(const Grid& img) { return separable5(img, kAnalysis); }

Grid down(const Grid& img) {
    const ImageDims d = image_dims(img, "down");
    const Grid low = blur(img);
    const std::size_t oh = (d.h + 1) / 2, ow = (d.w + 1) / 2;
    Grid out = make_image(oh, ow, d.c, img.rank() == 3);
    for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t x = 0; x < ow; ++x) {
            for (std::size_t ch = 0; ch < d.c; ++ch) {
                out[(y * ow + x) * d.c + ch] = low[((2 * y) * d.w + 2 * x) * d.c + ch];
            }
        }
    }
    return out;
}

Grid up(const Grid& img, std::size_t target_h, std::size_t target_w) {
    const ImageDims d = image_dims(img, "up");
    if (target_h + 1 < 2 * d.h || target_h > 2 * d.h || target_w + 1 < 2 * d.w ||
        target_w > 2 * d.w) {
        throw input_error("up: target dims must be 2h-1..2h by 2w-1..2w");
    }
    Grid stuffed = make_image(target_h, target_w, d.c, img.rank() == 3);
    for (std::size_t y = 0; y < d.h; ++y) {
        if (2 * y >= target_h) break;
        for (std::size_t x = 0; x < d.w; ++x) {
            if (2 * x >= target_w) break;
            for (std::size_t ch = 0; ch < d.c; ++ch) {
                stuffed[((2 * y) * target_w + 2 * x) * d.c + ch] = img[(y * d.w + x) * d.c + ch];
            }
        }
    }
    return separable5(stuffed, kSynthesis);
}

Pyramid pyramid_build(const Grid& img, int levels) {
    if (levels < 1) throw input_error("pyramid_build: need at least 1 level");
    const ImageDims d0 = image_dims(img, "pyramid_build");
    (void)d0;
    Pyramid p;
    p.gaussians.push_back(img);
    for (int k = 0; k < levels; ++k) {
        const Grid& g = p.gaussians.back();
        const ImageDims d = image_dims(g, "pyramid_build");
        if (d.h == 1 && d.w == 1) {
            throw input_error("pyramid_build: pyramid too deep, level is already 1x1");
        }
        Grid next = down(g);
        p.laplacians.push_back(sub(g, up(next, d.h, d.w)));
        p.gaussians.push_back(std::move(next));
    }
    p.base = p.gaussians.back();
    return p;
}

Grid pyramid_reconstruct(const Pyramid& p) {
    if (p.laplacians.empty()) throw input_error("pyramid_reconstruct: empty pyramid");
    Grid acc = p.base;
    for (std::size_t k = p.laplacians.size(); k-- > 0;) {
        const Grid& lap = p.laplacians[k];
        const ImageDims d = image_dims(lap, "pyramid_reconstruct");
        Grid upped = up(acc, d.h, d.w);
        if (!upped.same_shape(lap)) {
            throw state_error("pyramid_reconstruct: level dims do not chain");
        }
        acc = add(lap, upped);
    }
    return acc;
}

}  // namespace refinery
