#pragma once

// Synthetic gland-like images: bright ellipses with darker rims on a dim
// background, some placed 1-2 pixels from a neighbour.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <vector>

#include "instance.hpp"
#include "losses.hpp"
#include "tensor.hpp"

namespace prs2 {

inline constexpr std::size_t kToyImageSize = 64;

struct Sample {
    std::size_t id = 0;
    Tensor image;      // 1 x 64 x 64 in [0, 1]
    InstanceMap mask;
    bool touching = false;
};

struct ToyDataset {
    std::vector<Sample> labeled;
    std::vector<Sample> unlabeled; // masks are never read during training
    std::vector<Sample> test;
    std::uint64_t seed = 0;
};

struct SynthOptions {
    std::size_t size = kToyImageSize;
    double noise_sigma = 0.05;
    /// Gaussian blur applied before noise; softens 1-2 pixel gaps.
    double blur_sigma = 1.5;
    double touching_probability = 0.5;
    std::size_t min_glands = 2;
    std::size_t max_glands = 6;
};

/// Chebyshev gap, in background pixels, between two disjoint masks
/// (0 when they are 8-adjacent; large when either is empty).
inline std::size_t mask_gap(const BinaryMask& a, const BinaryMask& b, std::size_t max_gap = 16)
{
    for (std::size_t k = 0; k <= max_gap; ++k) {
        const BinaryMask grown = dilate(a, 2 * k + 3);
        for (std::size_t i = 0; i < b.size(); ++i)
            if (grown[i] && b[i]) return k;
    }
    return max_gap + 1;
}

/// True when some pair of instances is separated by at most `max_gap` pixels.
inline bool has_near_touching_pair(const InstanceMap& map, std::size_t max_gap = 2)
{
    for (std::size_t i = 1; i <= map.count(); ++i) {
        const BinaryMask grown = dilate(map.instance_mask(static_cast<int>(i)), 2 * max_gap + 3);
        for (std::size_t p = 0; p < grown.size(); ++p) {
            if (grown[p] && map[p] > 0 && map[p] != static_cast<int>(i)) return true;
        }
    }
    return false;
}

namespace detail {

struct Ellipse {
    double cy, cx, ry, rx, theta;

    // normalized radius; <= 1 inside
    double radius(double y, double x) const
    {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(theta), s = std::sin(theta);
        const double u = (c * dx + s * dy) / rx;
        const double v = (-s * dx + c * dy) / ry;
        return std::sqrt(u * u + v * v);
    }

    BinaryMask raster(std::size_t n) const
    {
        BinaryMask m(n, n, 0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < n; ++c) m(r, c) = radius(static_cast<double>(r), static_cast<double>(c)) <= 1.0;
        return m;
    }
};

// Separable Gaussian blur with edge replication.
inline std::vector<double> gaussian_blur(const std::vector<double>& img, std::size_t n, double sigma)
{
    if (sigma <= 0.0) return img;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double ks = 0.0;
    for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= ks;
    const int ni = static_cast<int>(n);
    auto clampi = [&](int v) { return std::clamp(v, 0, ni - 1); };
    std::vector<double> tmp(img.size()), out(img.size());
    for (int r = 0; r < ni; ++r)
        for (int c = 0; c < ni; ++c) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * img[r * n + clampi(c + d)];
            tmp[r * n + c] = acc;
        }
    for (int r = 0; r < ni; ++r)
        for (int c = 0; c < ni; ++c) {
            double acc = 0.0;
            for (int d = -radius; d <= radius; ++d) acc += k[d + radius] * tmp[clampi(r + d) * n + c];
            out[r * n + c] = acc;
        }
    return out;
}

inline bool intersects(const BinaryMask& a, const BinaryMask& b)
{
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] && b[i]) return true;
    return false;
}

inline std::size_t area(const BinaryMask& a) { return static_cast<std::size_t>(std::count(a.cells().begin(), a.cells().end(), 1)); }

} // namespace detail

/// One synthetic sample; deterministic in (seed, id).
inline Sample synth_sample(std::uint64_t seed, std::size_t id, const SynthOptions& opt = {})
{
    using detail::Ellipse;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(id), 0x67a55u};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    const std::size_t n = opt.size;
    const double nd = static_cast<double>(n);
    const std::size_t target = opt.min_glands +
        static_cast<std::size_t>(unit(rng) * static_cast<double>(opt.max_glands - opt.min_glands + 1));
    const bool want_touching = unit(rng) < opt.touching_probability;

    std::vector<Ellipse> shapes;
    std::vector<BinaryMask> masks;
    BinaryMask occupied(n, n, 0);

    auto random_ellipse = [&]() {
        Ellipse e;
        e.rx = uniform(5.0, 10.0);
        e.ry = uniform(4.0, 8.0);
        e.theta = uniform(0.0, std::numbers::pi);
        e.cx = uniform(e.rx * 0.6, nd - 1 - e.rx * 0.6);
        e.cy = uniform(e.rx * 0.6, nd - 1 - e.rx * 0.6);
        return e;
    };
    auto free_for = [&](const BinaryMask& m, std::size_t clearance) {
        return !detail::intersects(dilate(occupied, 2 * clearance + 3), m);
    };
    auto accept = [&](const Ellipse& e, BinaryMask m) {
        shapes.push_back(e);
        for (std::size_t i = 0; i < m.size(); ++i) occupied[i] |= m[i];
        masks.push_back(std::move(m));
    };

    // isolated glands keep a gap of >= 3 pixels
    constexpr std::size_t kClearance = 3;
    for (int attempt = 0; attempt < 200 && masks.empty(); ++attempt) {
        Ellipse e = random_ellipse();
        BinaryMask m = e.raster(n);
        if (detail::area(m) >= 40) accept(e, std::move(m));
    }

    if (want_touching && !masks.empty()) {
        // slide a second gland toward the first until the gap is 1-2 pixels
        const std::size_t want_gap = unit(rng) < 0.5 ? 1 : 2;
        for (int attempt = 0; attempt < 40; ++attempt) {
            Ellipse e = random_ellipse();
            const double phi = uniform(0.0, 2.0 * std::numbers::pi);
            const Ellipse& first = shapes.front();
            bool placed = false;
            for (double d = first.rx + e.rx + 6.0; d > 1.0; d -= 0.25) {
                e.cy = first.cy + d * std::sin(phi);
                e.cx = first.cx + d * std::cos(phi);
                if (e.cy < 2 || e.cx < 2 || e.cy > nd - 3 || e.cx > nd - 3) break;
                BinaryMask m = e.raster(n);
                const std::size_t gap = mask_gap(masks.front(), m, 4);
                if (gap > want_gap) continue;
                if (gap == want_gap && detail::area(m) >= 40) {
                    accept(e, std::move(m));
                    placed = true;
                }
                break;
            }
            if (placed) break;
        }
    }

    for (int attempt = 0; attempt < 400 && masks.size() < target; ++attempt) {
        Ellipse e = random_ellipse();
        BinaryMask m = e.raster(n);
        if (detail::area(m) >= 40 && free_for(m, kClearance)) accept(e, std::move(m));
    }

    Sample s;
    s.id = id;
    LabelGrid labels(n, n, 0);
    for (std::size_t k = 0; k < masks.size(); ++k)
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (masks[k][i]) labels[i] = static_cast<int>(k + 1);
    s.mask = InstanceMap::from_labels(labels);

    std::normal_distribution<double> noise(0.0, opt.noise_sigma);
    const double background = uniform(0.15, 0.3);
    std::vector<double> interior(shapes.size());
    for (auto& v : interior) v = uniform(0.7, 0.9);
    std::vector<double> clean(n * n);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            double v = background;
            for (std::size_t k = 0; k < shapes.size(); ++k) {
                if (!masks[k](r, c)) continue;
                const Ellipse& e = shapes[k];
                const double rim = 1.0 - 1.6 / std::min(e.rx, e.ry);
                v = e.radius(static_cast<double>(r), static_cast<double>(c)) > rim ? 0.45 : interior[k];
            }
            clean[r * n + c] = v;
        }
    }
    clean = detail::gaussian_blur(clean, n, opt.blur_sigma);
    s.image = Tensor({1, n, n});
    for (std::size_t i = 0; i < n * n; ++i) s.image[i] = std::clamp(clean[i] + noise(rng), 0.0, 1.0);
    s.touching = has_near_touching_pair(s.mask, 2);
    return s;
}

inline std::vector<Sample> synth_samples(std::size_t count, std::uint64_t seed, const SynthOptions& opt = {})
{
    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(synth_sample(seed, i, opt));
    return out;
}

/// Generates `count` samples; the first quarter (at least one) becomes the
/// test set and the rest are labeled.
inline ToyDataset synth_generate(std::size_t count, std::uint64_t seed, const SynthOptions& opt = {})
{
    if (count < 4) throw ConfigError("synth_generate needs count >= 4, got " + std::to_string(count));
    auto all = synth_samples(count, seed, opt);
    ToyDataset ds;
    ds.seed = seed;
    const std::size_t n_test = std::max<std::size_t>(1, count / 4);
    ds.test.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(n_test)));
    ds.labeled.assign(std::make_move_iterator(all.begin() + static_cast<std::ptrdiff_t>(n_test)), std::make_move_iterator(all.end()));
    return ds;
}

/// Keeps round(fraction * |labeled|) labeled samples (chosen by `seed`) and
/// moves the rest to the unlabeled pool.
inline ToyDataset with_labeled_fraction(ToyDataset ds, double fraction, std::uint64_t seed)
{
    if (!(fraction > 0.0 && fraction <= 1.0)) {
        throw ConfigError("labeled fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.labeled.size())));
    if (keep < 1) throw ConfigError("labeled fraction " + std::to_string(fraction) + " leaves no labeled image");
    std::mt19937_64 rng(seed ^ 0x5eed1abe1ULL);
    std::shuffle(ds.labeled.begin(), ds.labeled.end(), rng);
    for (std::size_t i = keep; i < ds.labeled.size(); ++i) ds.unlabeled.push_back(std::move(ds.labeled[i]));
    ds.labeled.resize(keep);
    auto by_id = [](const Sample& a, const Sample& b) { return a.id < b.id; };
    std::sort(ds.labeled.begin(), ds.labeled.end(), by_id);
    std::sort(ds.unlabeled.begin(), ds.unlabeled.end(), by_id);
    return ds;
}

} // namespace prs2
