#pragma once

// Finite-difference gradient suites and relation-module invariants, shared by
// the prm-check command and the test binaries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "losses.hpp"
#include "prm.hpp"
#include "tensor.hpp"

namespace prs2 {

struct SuiteResult {
    std::string name;
    std::size_t trials = 0;
    double max_rel_error = 0.0;
    bool passed = true;
    std::string detail; // first failure, if any
};

struct PropertyResult {
    std::string name;
    bool passed = true;
    std::string detail;
};

inline constexpr double kGradientTolerance = 1e-4;

inline const std::vector<std::string>& gradient_suite_names()
{
    static const std::vector<std::string> names{
        "matmul-lhs", "matmul-rhs", "softmax",  "sigmoid", "relu", "upsample",  "conv-input",
        "conv-weight", "conv-bias", "ce",       "dice",    "objdice", "smooth_l1", "pr_backward"};
    return names;
}

namespace detail {

// FNV-1a; stable across standard libraries, unlike std::hash.
inline std::uint32_t name_hash(const std::string& s)
{
    std::uint32_t h = 2166136261u;
    for (unsigned char ch : s) h = (h ^ ch) * 16777619u;
    return h;
}

inline std::mt19937_64 suite_rng(std::uint64_t seed, const std::string& name, std::size_t trial)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), name_hash(name),
                      static_cast<std::uint32_t>(trial)};
    return std::mt19937_64(seq);
}

inline Tensor random_normal(Shape shape, std::mt19937_64& rng, double sd = 1.0)
{
    Tensor t(std::move(shape));
    std::normal_distribution<double> d(0.0, sd);
    for (double& v : t.data()) v = d(rng);
    return t;
}

inline Tensor random_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi)
{
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> d(lo, hi);
    for (double& v : t.data()) v = d(rng);
    return t;
}

inline BinaryMask random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng, double p = 0.4)
{
    BinaryMask m(h, w, 0);
    std::bernoulli_distribution d(p);
    for (auto& v : m.cells()) v = d(rng) ? 1 : 0;
    return m;
}

// sum(w .* y): makes every output element count with an O(1) weight.
inline double weighted_sum(const Tensor& y, const Tensor& w)
{
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
}

// Rectangles of random labels on a small grid; at least one instance.
inline InstanceMap random_instances(std::size_t h, std::size_t w, std::mt19937_64& rng, int max_objects = 3)
{
    std::uniform_int_distribution<std::size_t> row(0, h - 1), col(0, w - 1), ext(1, std::max<std::size_t>(2, h / 2));
    std::uniform_int_distribution<int> count(1, max_objects);
    LabelGrid g(h, w, 0);
    const int k = count(rng);
    for (int label = 1; label <= k; ++label) {
        const std::size_t r0 = row(rng), c0 = col(rng), eh = ext(rng), ew = ext(rng);
        for (std::size_t r = r0; r < std::min(h, r0 + eh); ++r)
            for (std::size_t c = c0; c < std::min(w, c0 + ew); ++c) g(r, c) = label;
    }
    InstanceMap m = InstanceMap::from_labels(g);
    if (m.empty()) {
        g(0, 0) = 1;
        m = InstanceMap::from_labels(g);
    }
    return m;
}

// Values kept at least `margin` away from `kink`.
inline Tensor away_from(Tensor t, double kink, double margin)
{
    for (double& v : t.data()) {
        if (std::abs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin);
    }
    return t;
}

inline GradCheckReport check_single(const std::string& name, std::mt19937_64& rng)
{
    const double tol = kGradientTolerance;
    if (name == "matmul-lhs" || name == "matmul-rhs") {
        const Tensor a = random_normal({3, 4}, rng), b = random_normal({4, 5}, rng), w = random_normal({3, 5}, rng);
        if (name == "matmul-lhs") {
            return grad_check([&](const Tensor& x) { return weighted_sum(matmul(x, b), w); },
                              [&](const Tensor& x) { return matmul_backward(x, b, w).first; }, a, tol);
        }
        return grad_check([&](const Tensor& y) { return weighted_sum(matmul(a, y), w); },
                          [&](const Tensor& y) { return matmul_backward(a, y, w).second; }, b, tol);
    }
    if (name == "softmax") {
        const Tensor x = random_normal({3, 5}, rng, 2.0), w = random_normal({3, 5}, rng);
        const std::size_t axis = std::uniform_int_distribution<std::size_t>(0, 1)(rng);
        return grad_check([&](const Tensor& v) { return weighted_sum(softmax_axis(v, axis), w); },
                          [&](const Tensor& v) { return softmax_axis_backward(softmax_axis(v, axis), w, axis); }, x,
                          tol);
    }
    if (name == "sigmoid") {
        const Tensor x = random_normal({4, 4}, rng, 2.0), w = random_normal({4, 4}, rng);
        return grad_check([&](const Tensor& v) { return weighted_sum(sigmoid(v), w); },
                          [&](const Tensor& v) { return sigmoid_backward(sigmoid(v), w); }, x, tol);
    }
    if (name == "relu") {
        const Tensor x = away_from(random_normal({4, 4}, rng), 0.0, 0.05), w = random_normal({4, 4}, rng);
        return grad_check([&](const Tensor& v) { return weighted_sum(relu(v), w); },
                          [&](const Tensor& v) { return relu_backward(v, w); }, x, tol);
    }
    if (name == "upsample") {
        const std::size_t f = std::uniform_int_distribution<std::size_t>(2, 3)(rng);
        const Tensor x = random_normal({2, 3, 3}, rng), w = random_normal({2, 3 * f, 3 * f}, rng);
        return grad_check([&](const Tensor& v) { return weighted_sum(upsample_nearest(v, f), w); },
                          [&](const Tensor&) { return upsample_nearest_backward(w, f); }, x, tol);
    }
    if (name.starts_with("conv-")) {
        const ConvGeometry g{std::uniform_int_distribution<std::size_t>(1, 2)(rng), 1};
        const Tensor x = random_normal({2, 6, 6}, rng);
        Kernel k{random_normal({3, 2, 3, 3}, rng, 0.5), random_normal({3}, rng)};
        const Tensor w = random_normal(conv2d(x, k, g).shape(), rng);
        if (name == "conv-input") {
            return grad_check([&](const Tensor& v) { return weighted_sum(conv2d(v, k, g), w); },
                              [&](const Tensor& v) { return conv2d_backward(v, k, g, w).input; }, x, tol);
        }
        if (name == "conv-weight") {
            return grad_check(
                [&](const Tensor& v) { return weighted_sum(conv2d(x, Kernel{v, k.bias}, g), w); },
                [&](const Tensor& v) { return conv2d_backward(x, Kernel{v, k.bias}, g, w).weight; }, k.weight, tol);
        }
        return grad_check([&](const Tensor& v) { return weighted_sum(conv2d(x, Kernel{k.weight, v}, g), w); },
                          [&](const Tensor& v) { return conv2d_backward(x, Kernel{k.weight, v}, g, w).bias; }, k.bias,
                          tol);
    }
    if (name == "ce") {
        const Tensor p = random_uniform({2, 5, 5}, rng, 0.05, 0.95);
        const BinaryMask m = random_mask(5, 5, rng);
        return grad_check([&](const Tensor& v) { return cross_entropy(v, m).value; },
                          [&](const Tensor& v) { return cross_entropy(v, m).grad; }, p, tol);
    }
    if (name == "dice") {
        const Tensor p = random_uniform({6, 6}, rng, 0.0, 1.0);
        const BinaryMask m = random_mask(6, 6, rng);
        return grad_check([&](const Tensor& v) { return dice_loss(v, m).value; },
                          [&](const Tensor& v) { return dice_loss(v, m).grad; }, p, tol);
    }
    if (name == "objdice") {
        const InstanceMap gt = random_instances(8, 8, rng);
        const InstanceMap blobs = random_instances(8, 8, rng);
        Tensor p = random_uniform({8, 8}, rng, 0.0, 0.4);
        std::uniform_real_distribution<double> hi(0.6, 1.0);
        for (std::size_t i = 0; i < p.size(); ++i)
            if (blobs[i]) p[i] = hi(rng);
        const ObjectPartition part = partition_prediction(p, gt);
        return grad_check([&](const Tensor& v) { return object_dice_loss(v, gt, part).value; },
                          [&](const Tensor& v) { return object_dice_loss(v, gt, part).grad; }, p, tol);
    }
    if (name == "smooth_l1") {
        const Tensor t = random_normal({4, 4}, rng, 2.0);
        Tensor d = random_normal({4, 4}, rng, 1.5);
        d = away_from(away_from(d, 1.0, 0.05), -1.0, 0.05);
        const Tensor x = t + d;
        return grad_check([&](const Tensor& v) { return smooth_l1(v, t).value; },
                          [&](const Tensor& v) { return smooth_l1(v, t).grad; }, x, tol);
    }
    if (name == "pr_backward") {
        const FeaturePair pair{random_normal({3, 3, 3}, rng), random_normal({3, 3, 3}, rng)};
        const RelationOutput out = pr_forward(pair);
        // frozen targets: gradient through sigma(f) only
        const Tensor ta = sigmoid(out.f_tilde_a), tb = sigmoid(out.f_tilde_b);
        const PairGradients g = pr_backward(out, pair);
        auto frozen = [&](const Tensor& fa, const Tensor& fb) {
            return smooth_l1(sigmoid(fa), ta).value + smooth_l1(sigmoid(fb), tb).value;
        };
        GradCheckReport ra = grad_check([&](const Tensor& v) { return frozen(v, pair.f_b); },
                                        [&](const Tensor&) { return g.f_a; }, pair.f_a, tol);
        GradCheckReport rb = grad_check([&](const Tensor& v) { return frozen(pair.f_a, v); },
                                        [&](const Tensor&) { return g.f_b; }, pair.f_b, tol);
        // full derivative including the targets
        const PairGradients gp = pr_backward(out, pair, TargetGradient::Propagate);
        GradCheckReport pa = grad_check([&](const Tensor& v) { return pr_forward({v, pair.f_b}).l_pr; },
                                        [&](const Tensor&) { return gp.f_a; }, pair.f_a, tol);
        GradCheckReport pb = grad_check([&](const Tensor& v) { return pr_forward({pair.f_a, v}).l_pr; },
                                        [&](const Tensor&) { return gp.f_b; }, pair.f_b, tol);
        GradCheckReport worst = ra;
        for (const auto* r : {&rb, &pa, &pb}) {
            if (!r->finite || r->max_rel_error > worst.max_rel_error) worst = *r;
        }
        worst.passed = ra.passed && rb.passed && pa.passed && pb.passed;
        worst.finite = ra.finite && rb.finite && pa.finite && pb.finite;
        return worst;
    }
    throw std::invalid_argument("unknown gradient suite '" + name + "'");
}

} // namespace detail

/// Runs `trials` randomized finite-difference checks of one suite.
inline SuiteResult run_gradient_suite(const std::string& name, std::uint64_t seed, std::size_t trials = 20)
{
    SuiteResult res{name, trials, 0.0, true, {}};
    for (std::size_t t = 0; t < trials; ++t) {
        auto rng = detail::suite_rng(seed, name, t);
        const GradCheckReport r = detail::check_single(name, rng);
        res.max_rel_error = std::max(res.max_rel_error, r.finite ? r.max_rel_error : INFINITY);
        if ((!r.passed || !r.finite) && res.passed) {
            res.passed = false;
            res.detail = "trial " + std::to_string(t) + ": rel err " + std::to_string(r.max_rel_error) +
                         " at element " + std::to_string(r.worst_index) + (r.finite ? "" : " (non-finite)");
        }
    }
    return res;
}

inline std::vector<SuiteResult> run_gradient_suites(std::uint64_t seed, std::size_t trials = 20)
{
    std::vector<SuiteResult> out;
    for (const auto& name : gradient_suite_names()) out.push_back(run_gradient_suite(name, seed, trials));
    return out;
}

/// Normalization, boundedness, symmetry and the 1 x 1 analytic case of the
/// relation module, over `trials` random feature pairs.
inline std::vector<PropertyResult> prm_invariants(std::uint64_t seed, std::size_t trials = 20)
{
    PropertyResult norm{"consistency columns sum to 1", true, {}};
    PropertyResult bounded{"attention within source channel range", true, {}};
    PropertyResult sym{"l_pr symmetric in (A, B)", true, {}};
    PropertyResult unit{"1x1 features: f_tilde_a = f_a + f_b", true, {}};
    auto fail = [](PropertyResult& p, std::size_t t, const std::string& what) {
        if (!p.passed) return;
        p.passed = false;
        p.detail = "trial " + std::to_string(t) + ": " + what;
    };
    for (std::size_t t = 0; t < trials; ++t) {
        auto rng = detail::suite_rng(seed, "prm-invariants", t);
        const std::size_t c = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
        const std::size_t h = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
        const std::size_t w = std::uniform_int_distribution<std::size_t>(1, 5)(rng);
        const double scale = std::uniform_real_distribution<double>(0.1, 4.0)(rng);
        const FeaturePair pair{detail::random_normal({c, h, w}, rng, scale), detail::random_normal({c, h, w}, rng, scale)};
        const RelationOutput out = pr_forward(pair);

        for (const Tensor* m : {&out.c_ba, &out.c_ab}) {
            const std::size_t n = m->extent(0);
            for (std::size_t col = 0; col < n; ++col) {
                double s = 0.0;
                for (std::size_t row = 0; row < n; ++row) s += (*m)(row, col);
                if (std::abs(s - 1.0) > 1e-9) fail(norm, t, "column " + std::to_string(col) + " sums to " + std::to_string(s));
            }
        }

        auto check_bounds = [&](const Tensor& att, const Tensor& src) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                double lo = INFINITY, hi = -INFINITY;
                for (std::size_t i = 0; i < h * w; ++i) {
                    lo = std::min(lo, src[ch * h * w + i]);
                    hi = std::max(hi, src[ch * h * w + i]);
                }
                const double slack = 1e-12 * std::max(1.0, std::max(std::abs(lo), std::abs(hi)));
                for (std::size_t i = 0; i < h * w; ++i) {
                    const double v = att[ch * h * w + i];
                    if (v < lo - slack || v > hi + slack) fail(bounded, t, "channel " + std::to_string(ch) + " out of range");
                }
            }
        };
        check_bounds(out.m_a, pair.f_b);
        check_bounds(out.m_b, pair.f_a);

        const RelationOutput swapped = pr_forward({pair.f_b, pair.f_a});
        if (swapped.l_pr != out.l_pr) fail(sym, t, "l_pr(A,B) != l_pr(B,A)");

        const FeaturePair tiny{detail::random_normal({c, 1, 1}, rng, scale), detail::random_normal({c, 1, 1}, rng, scale)};
        const RelationOutput one = pr_forward(tiny);
        for (std::size_t ch = 0; ch < c; ++ch) {
            if (one.f_tilde_a[ch] != tiny.f_a[ch] + tiny.f_b[ch]) fail(unit, t, "channel " + std::to_string(ch));
        }
    }
    return {norm, bounded, sym, unit};
}

} // namespace prs2
