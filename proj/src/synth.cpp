#include "refinery/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "refinery/data.hpp"
#include "refinery/error.hpp"
#include "refinery/rng.hpp"

namespace refinery {

namespace {

struct Point {
    double x, y;
};

// Glyph skeletons in a unit box (x right, y down), one polyline per stroke.
using Stroke = std::vector<Point>;
using Glyph = std::vector<Stroke>;

Stroke arc(double cx, double cy, double rx, double ry, double a0, double a1, int segs) {
    Stroke s;
    for (int i = 0; i <= segs; ++i) {
        const double a = a0 + (a1 - a0) * static_cast<double>(i) / segs;
        s.push_back({cx + rx * std::cos(a), cy + ry * std::sin(a)});
    }
    return s;
}

const std::vector<Glyph>& glyphs() {
    static const std::vector<Glyph> g = [] {
        constexpr double pi = 3.14159265358979323846;
        std::vector<Glyph> v(10);
        v[0] = {arc(0.50, 0.50, 0.26, 0.40, 0, 2 * pi, 28)};
        v[1] = {{{0.36, 0.24}, {0.56, 0.09}, {0.56, 0.91}}, {{0.38, 0.91}, {0.72, 0.91}}};
        v[2] = {[] {
            Stroke s = arc(0.50, 0.26, 0.25, 0.17, -pi, 0.25 * pi, 12);
            s.push_back({0.26, 0.88});
            s.push_back({0.78, 0.88});
            return s;
        }()};
        v[3] = {[] {
            Stroke s = arc(0.48, 0.27, 0.24, 0.18, -0.85 * pi, 0.45 * pi, 10);
            const Stroke lower = arc(0.47, 0.69, 0.27, 0.21, -0.45 * pi, 0.85 * pi, 10);
            s.insert(s.end(), lower.begin(), lower.end());
            return s;
        }()};
        v[4] = {{{0.60, 0.09}, {0.22, 0.60}, {0.80, 0.60}}, {{0.62, 0.34}, {0.62, 0.92}}};
        v[5] = {[] {
            Stroke s{{0.74, 0.10}, {0.32, 0.10}, {0.29, 0.44}};
            const Stroke belly = arc(0.48, 0.65, 0.26, 0.24, -0.55 * pi, 0.80 * pi, 12);
            s.insert(s.end(), belly.begin(), belly.end());
            return s;
        }()};
        v[6] = {[] {
            Stroke s{{0.66, 0.10}, {0.42, 0.36}, {0.30, 0.62}};
            const Stroke loop = arc(0.50, 0.68, 0.21, 0.21, -pi, pi, 16);
            s.insert(s.end(), loop.begin(), loop.end());
            return s;
        }()};
        v[7] = {{{0.24, 0.12}, {0.78, 0.12}, {0.42, 0.90}}};
        v[8] = {arc(0.50, 0.30, 0.19, 0.19, -0.5 * pi, 1.5 * pi, 16),
                arc(0.50, 0.68, 0.23, 0.22, -0.5 * pi, 1.5 * pi, 16)};
        v[9] = {arc(0.52, 0.32, 0.21, 0.21, 0, 2 * pi, 16), {{0.73, 0.34}, {0.66, 0.90}}};
        return v;
    }();
    return g;
}

double dist_to_segment(double px, double py, const Point& a, const Point& b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len2 = vx * vx + vy * vy;
    double t = 0.0;
    if (len2 > 0.0) {
        t = std::clamp(((px - a.x) * vx + (py - a.y) * vy) / len2, 0.0, 1.0);
    }
    const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

void render_digit(double* img, int cls, RngStream& rng) {
    const Glyph& glyph = glyphs()[static_cast<std::size_t>(cls)];

    // Per-image style: affine warp, wobble, stroke width, ink level.
    const double rot = (rng.uniform01() - 0.5) * 0.42;
    const double shear = (rng.uniform01() - 0.5) * 0.36;
    const double sx = 0.84 + rng.uniform01() * 0.26;
    const double sy = 0.84 + rng.uniform01() * 0.26;
    const double tx = (rng.uniform01() - 0.5) * 3.2;
    const double ty = (rng.uniform01() - 0.5) * 3.2;
    const double width = 0.85 + rng.uniform01() * 0.75;
    const double ink = 0.78 + rng.uniform01() * 0.22;
    const double wobble = 0.45;

    const double cr = std::cos(rot), sr = std::sin(rot);
    auto map = [&](Point p) -> Point {
        // Unit box to pixel box, then jitter.
        double x = (p.x - 0.5) * 20.0 * sx;
        double y = (p.y - 0.5) * 23.0 * sy;
        x += shear * y;
        const double rxp = cr * x - sr * y;
        const double ryp = sr * x + cr * y;
        return {rxp + 13.5 + tx + rng.normal() * wobble, ryp + 13.5 + ty + rng.normal() * wobble};
    };

    constexpr double soft = 0.55;
    for (const Stroke& stroke : glyph) {
        std::vector<Point> pts(stroke.size());
        for (std::size_t i = 0; i < stroke.size(); ++i) pts[i] = map(stroke[i]);
        for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
            const Point& a = pts[i];
            const Point& b = pts[i + 1];
            const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - width - 2)));
            const int x1 = std::min(27, static_cast<int>(std::ceil(std::max(a.x, b.x) + width + 2)));
            const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - width - 2)));
            const int y1 = std::min(27, static_cast<int>(std::ceil(std::max(a.y, b.y) + width + 2)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double d = dist_to_segment(x, y, a, b);
                    const double v = ink / (1.0 + std::exp((d - width) / soft));
                    double& px = img[y * 28 + x];
                    px = std::max(px, v);
                }
            }
        }
    }
}

}  // namespace

Grid synth_digit_images(std::size_t n, std::uint64_t seed, std::vector<std::int32_t>* labels_out) {
    Grid images({n, 28, 28});
    std::vector<std::int32_t> labels(n);
    RngStream label_rng(seed, 0xD1617);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<std::int32_t>(i % 10);
    }
    // Shuffle so class order carries no batch structure.
    for (std::size_t i = n; i > 1; --i) {
        std::swap(labels[i - 1], labels[label_rng.below(i)]);
    }
    for (std::size_t i = 0; i < n; ++i) {
        RngStream rng(seed, 0x1000000 + i);
        render_digit(images.data() + i * 784, labels[i], rng);
    }
    if (labels_out) *labels_out = std::move(labels);
    return images;
}

void write_synth_corpus(const std::string& dir, std::size_t n_train, std::size_t n_test,
                        std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    std::vector<std::int32_t> labels;
    Grid train = synth_digit_images(n_train, seed * 2 + 0, &labels);
    write_idx_images(dir + "/train-images-idx3-ubyte", train);
    write_idx_labels(dir + "/train-labels-idx1-ubyte", labels);
    Grid test = synth_digit_images(n_test, seed * 2 + 1, &labels);
    write_idx_images(dir + "/t10k-images-idx3-ubyte", test);
    write_idx_labels(dir + "/t10k-labels-idx1-ubyte", labels);
}

}  // namespace refinery
