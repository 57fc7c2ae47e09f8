#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include <prs2/prm.hpp>
#include <prs2/verify.hpp>

using namespace prs2;

namespace {

Tensor normal(Shape s, std::mt19937_64& rng, double sd = 1.0)
{
    Tensor t(std::move(s));
    std::normal_distribution<double> d(0.0, sd);
    for (double& v : t.data()) v = d(rng);
    return t;
}

// direct summation: M[ch, j] = sum_i f_src[ch, i] * c(i, j)
Tensor attention_oracle(const Tensor& f_src, const Tensor& c)
{
    const std::size_t ch = f_src.extent(0), h = f_src.extent(1), w = f_src.extent(2);
    Tensor out({ch, h, w});
    for (std::size_t k = 0; k < ch; ++k)
        for (std::size_t j = 0; j < h * w; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < h * w; ++i) s += f_src(k, i / w, i % w) * c(i, j);
            out(k, j / w, j % w) = s;
        }
    return out;
}

// consistency matrix straight from its definition
Tensor consistency_oracle(const Tensor& f_dst, const Tensor& f_src)
{
    const std::size_t ch = f_dst.extent(0), n = f_dst.extent(1) * f_dst.extent(2);
    Tensor c({n, n});
    for (std::size_t j = 0; j < n; ++j) {
        std::vector<double> logit(n);
        for (std::size_t i = 0; i < n; ++i) {
            double s = 0.0;
            for (std::size_t k = 0; k < ch; ++k) s += f_dst[k * n + j] * f_src[k * n + i];
            logit[i] = s;
        }
        const double mx = *std::max_element(logit.begin(), logit.end());
        double z = 0.0;
        for (double v : logit) z += std::exp(v - mx);
        for (std::size_t i = 0; i < n; ++i) c(i, j) = std::exp(logit[i] - mx) / z;
    }
    return c;
}

double sl1(double x, double t)
{
    const double d = std::abs(x - t);
    return d < 1.0 ? 0.5 * d * d : d - 0.5;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace

TEST(Consistency, SinglePositionIsOne)
{
    std::mt19937_64 rng(1);
    const Tensor a = normal({4, 1, 1}, rng), b = normal({4, 1, 1}, rng);
    EXPECT_EQ(consistency_matrix(a, b), Tensor({1, 1}, {1.0}));
    EXPECT_EQ(attention_map(b, consistency_matrix(a, b)), b);
}

TEST(Consistency, MatchesDefinitionAndColumnsSumToOne)
{
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = normal({3, 2, 3}, rng), b = normal({3, 2, 3}, rng);
        const Tensor c = consistency_matrix(a, b), ref = consistency_oracle(a, b);
        for (std::size_t i = 0; i < c.size(); ++i) EXPECT_NEAR(c[i], ref[i], 1e-12);
        for (std::size_t j = 0; j < 6; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < 6; ++i) s += c(i, j);
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
}

TEST(Consistency, MassConcentratesOnAlignedPosition)
{
    // destination position 0 is aligned with source position 1 and orthogonal to source 0
    for (double scale : {1.0, 4.0, 16.0}) {
        const Tensor dst({2, 1, 2}, {scale, 0.0, 0.0, 0.0});
        const Tensor src({2, 1, 2}, {0.0, scale, scale, 0.0});
        const Tensor c = consistency_matrix(dst, src);
        EXPECT_GT(c(1, 0), c(0, 0));
        if (scale == 16.0) {
            EXPECT_GT(c(1, 0), 1.0 - 1e-12);
        }
    }
}

TEST(Consistency, ShapeMismatch)
{
    EXPECT_THROW(consistency_matrix(Tensor({2, 2, 2}), Tensor({2, 2, 3})), DimensionError);
    EXPECT_THROW(attention_map(Tensor({2, 2, 2}), Tensor({3, 3})), DimensionError);
}

TEST(Attention, MatchesDoubleLoop)
{
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = normal({2, 2, 2}, rng), b = normal({2, 2, 2}, rng);
        const Tensor c = consistency_matrix(a, b);
        const Tensor m = attention_map(b, c), ref = attention_oracle(b, c);
        for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], ref[i], 1e-12);
    }
}

TEST(Attention, ConstantSourceStaysConstant)
{
    std::mt19937_64 rng(4);
    const Tensor a = normal({2, 3, 3}, rng);
    Tensor b({2, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        b[i] = 0.7;
        b[9 + i] = -1.25;
    }
    const Tensor m = attention_map(b, consistency_matrix(a, b));
    for (std::size_t i = 0; i < 9; ++i) {
        EXPECT_NEAR(m[i], 0.7, 1e-12);
        EXPECT_NEAR(m[9 + i], -1.25, 1e-12);
    }
}

TEST(PrForward, ZeroFeatures)
{
    const FeaturePair fp{Tensor({3, 2, 2}), Tensor({3, 2, 2})};
    const RelationOutput out = pr_forward(fp);
    EXPECT_EQ(out.m_a, Tensor({3, 2, 2}));
    EXPECT_EQ(out.l_pr, 0.0);
    const PairGradients g = pr_backward(out, fp);
    EXPECT_EQ(g.f_a, Tensor({3, 2, 2}));
    EXPECT_EQ(g.f_b, Tensor({3, 2, 2}));
}

TEST(PrForward, ScalarFeaturesHandValue)
{
    const double a = 0.3, b = -1.1;
    const FeaturePair fp{Tensor({1, 1, 1}, {a}), Tensor({1, 1, 1}, {b})};
    const RelationOutput out = pr_forward(fp);
    EXPECT_EQ(out.f_tilde_a[0], a + b);
    EXPECT_EQ(out.f_tilde_b[0], a + b);
    EXPECT_NEAR(out.l_pr, sl1(sig(a), sig(a + b)) + sl1(sig(b), sig(a + b)), 1e-15);
}

TEST(PrForward, NonNegativeAndSymmetric)
{
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor a = normal({4, 3, 3}, rng), b = normal({4, 3, 3}, rng);
        const double ab = pr_forward({a, b}).l_pr, ba = pr_forward({b, a}).l_pr;
        EXPECT_GE(ab, 0.0);
        EXPECT_EQ(ab, ba);
    }
}

TEST(PrForward, PositionPermutationEquivariance)
{
    // permuting the source positions leaves the attention output unchanged
    std::mt19937_64 rng(6);
    const Tensor a = normal({2, 2, 2}, rng), b = normal({2, 2, 2}, rng);
    Tensor b_perm = b;
    const std::size_t perm[4] = {3, 0, 2, 1};
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t i = 0; i < 4; ++i) b_perm[k * 4 + perm[i]] = b[k * 4 + i];
    const Tensor m = attention_map(b, consistency_matrix(a, b));
    const Tensor mp = attention_map(b_perm, consistency_matrix(a, b_perm));
    for (std::size_t i = 0; i < m.size(); ++i) EXPECT_NEAR(m[i], mp[i], 1e-12);
}

TEST(PrBackward, DetachedMatchesFrozenTargetDifferences)
{
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor a = normal({2, 3, 3}, rng), b = normal({2, 3, 3}, rng);
        const RelationOutput out = pr_forward({a, b});
        const PairGradients g = pr_backward(out, {a, b});
        const Tensor ta = sigmoid(out.f_tilde_a);
        const auto rep = grad_check([&](const Tensor& x) { return smooth_l1(sigmoid(x), ta).value; },
                                    [&](const Tensor&) { return g.f_a; }, a, 1e-4);
        EXPECT_TRUE(rep.passed) << rep.max_rel_error;
    }
}

TEST(PrBackward, PropagatingThroughTargetsChangesGradient)
{
    std::mt19937_64 rng(8);
    const Tensor a = normal({2, 3, 3}, rng), b = normal({2, 3, 3}, rng);
    const RelationOutput out = pr_forward({a, b});
    const PairGradients det = pr_backward(out, {a, b}, TargetGradient::Detached);
    const PairGradients full = pr_backward(out, {a, b}, TargetGradient::Propagate);
    double diff = 0.0;
    for (std::size_t i = 0; i < det.f_a.size(); ++i) diff += std::abs(det.f_a[i] - full.f_a[i]);
    EXPECT_GT(diff, 1e-6);
    const auto rep = grad_check([&](const Tensor& x) { return pr_forward({x, b}).l_pr; },
                                [&](const Tensor&) { return full.f_a; }, a, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error;
}

TEST(AttentionSummary, ZeroInputIsDegenerate)
{
    const AttentionSummary s = export_attention_summary(Tensor({3, 4, 4}));
    EXPECT_TRUE(s.degenerate);
    for (auto v : s.image.cells()) EXPECT_EQ(v, 128);
}

TEST(AttentionSummary, HotPixelIsBrightest)
{
    Tensor f({3, 4, 4});
    f(1, 2, 1) = 5.0;
    const AttentionSummary s = export_attention_summary(f);
    EXPECT_FALSE(s.degenerate);
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(s.image(r, c), (r == 2 && c == 1) ? 255 : 0);
}

TEST(Invariants, AllHold)
{
    for (const PropertyResult& p : prm_invariants(11, 10)) EXPECT_TRUE(p.passed) << p.name << ": " << p.detail;
}

TEST(GradientSuites, RelationAndConvSuitesPass)
{
    for (const char* name : {"pr_backward", "conv-input", "conv-weight", "conv-bias", "softmax", "matmul-lhs"}) {
        const SuiteResult r = run_gradient_suite(name, 4, 10);
        EXPECT_TRUE(r.passed) << name << ": " << r.detail;
    }
}
