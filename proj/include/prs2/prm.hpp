#pragma once

// Pairwise relation module: cross-image consistency matrices, attention maps,
// target-highlighted features and the detached-target consistency loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "instance.hpp"
#include "losses.hpp"
#include "tensor.hpp"

namespace prs2 {

struct PrmOptions {
    /// Scale logits by 1/sqrt(C). Off: the relation uses a plain dot product.
    bool scale_logits = false;
};

struct FeaturePair {
    Tensor f_a;
    Tensor f_b;

    void validate() const
    {
        require_rank(f_a, 3, "FeaturePair");
        Tensor::require_same_shape(f_a, f_b, "FeaturePair");
    }
};

namespace detail {

inline double logit_scale(const Tensor& f, const PrmOptions& opt)
{
    return opt.scale_logits ? 1.0 / std::sqrt(static_cast<double>(f.extent(0))) : 1.0;
}

} // namespace detail

/// C_{src->dst} = softmax(R(f_dst)^T R(f_src))^T, normalized over the source
/// positions. Entry (i, j) is the weight of source position i for
/// destination position j; every column sums to 1.
inline Tensor consistency_matrix(const Tensor& f_dst, const Tensor& f_src, const PrmOptions& opt = {})
{
    require_rank(f_dst, 3, "consistency_matrix");
    Tensor::require_same_shape(f_dst, f_src, "consistency_matrix");
    Tensor logits = matmul(transpose(collapse(f_dst)), collapse(f_src));
    logits *= detail::logit_scale(f_dst, opt);
    return transpose(softmax_axis(logits, 1));
}

/// R^-1(R(f_src) . c): each output position is a convex combination of the
/// source positions.
inline Tensor attention_map(const Tensor& f_src, const Tensor& c)
{
    require_rank(f_src, 3, "attention_map");
    const std::size_t hw = f_src.extent(1) * f_src.extent(2);
    if (c.shape() != Shape{hw, hw}) {
        throw DimensionError("attention_map: relation " + shape_string(c.shape()) + " does not fit features " +
                             shape_string(f_src.shape()));
    }
    return uncollapse(matmul(collapse(f_src), c), f_src.extent(1), f_src.extent(2));
}

struct RelationOutput {
    Tensor c_ba;       // relation from f_b to f_a
    Tensor c_ab;       // relation from f_a to f_b
    Tensor m_a;
    Tensor m_b;
    Tensor f_tilde_a;  // m_a + f_a
    Tensor f_tilde_b;  // m_b + f_b
    double l_pr = 0.0;
    double l_ba = 0.0; // SL1(sigma(f_a) -> sigma(f_tilde_a))
    double l_ab = 0.0;
};

inline RelationOutput pr_forward(const FeaturePair& pair, const PrmOptions& opt = {})
{
    pair.validate();
    RelationOutput out;
    out.c_ba = consistency_matrix(pair.f_a, pair.f_b, opt);
    out.c_ab = consistency_matrix(pair.f_b, pair.f_a, opt);
    out.m_a = attention_map(pair.f_b, out.c_ba);
    out.m_b = attention_map(pair.f_a, out.c_ab);
    out.f_tilde_a = out.m_a + pair.f_a;
    out.f_tilde_b = out.m_b + pair.f_b;
    // sigma(f_tilde) is the (constant) target; sigma(f) is pulled toward it.
    out.l_ba = smooth_l1(sigmoid(pair.f_a), sigmoid(out.f_tilde_a)).value;
    out.l_ab = smooth_l1(sigmoid(pair.f_b), sigmoid(out.f_tilde_b)).value;
    out.l_pr = out.l_ba + out.l_ab;
    return out;
}

struct PairGradients {
    Tensor f_a;
    Tensor f_b;
};

enum class TargetGradient {
    Detached,  // targets are constants
    Propagate, // also differentiate through f_tilde (diagnostic only)
};

namespace detail {

// Gradients w.r.t. (f_dst, f_src) of f_tilde_dst = R^-1(R(f_src) C) + f_dst with
// C = consistency_matrix(f_dst, f_src), given g = dLoss/d f_tilde_dst.
inline std::pair<Tensor, Tensor> highlighted_backward(const Tensor& f_dst, const Tensor& f_src, const Tensor& c,
                                                      const Tensor& g, const PrmOptions& opt)
{
    const std::size_t h = f_dst.extent(1), w = f_dst.extent(2);
    const Tensor a = collapse(f_dst), b = collapse(f_src), dm = collapse(g);
    auto [db, dc] = matmul_backward(b, c, dm);
    const Tensor d_logits = softmax_axis_backward(transpose(c), transpose(dc), 1) * logit_scale(f_dst, opt);
    // logits = A^T B
    Tensor da = matmul(b, transpose(d_logits));
    db += matmul(a, d_logits);
    Tensor d_dst = uncollapse(da, h, w);
    d_dst += g;
    return {std::move(d_dst), uncollapse(db, h, w)};
}

} // namespace detail

/// Gradients of l_pr w.r.t. both feature maps. With detached targets the
/// gradient flows only through sigma(f) of each smooth-L1 term.
inline PairGradients pr_backward(const RelationOutput& out, const FeaturePair& pair,
                                 TargetGradient mode = TargetGradient::Detached, const PrmOptions& opt = {})
{
    pair.validate();
    const Tensor sa = sigmoid(pair.f_a), sb = sigmoid(pair.f_b);
    const Tensor sta = sigmoid(out.f_tilde_a), stb = sigmoid(out.f_tilde_b);
    const LossValue la = smooth_l1(sa, sta), lb = smooth_l1(sb, stb);

    PairGradients grads{sigmoid_backward(sa, la.grad), sigmoid_backward(sb, lb.grad)};
    if (mode == TargetGradient::Propagate) {
        // d/d target = -d/d x for smooth-L1 of (x - target)
        const Tensor gta = sigmoid_backward(sta, la.grad * -1.0);
        const Tensor gtb = sigmoid_backward(stb, lb.grad * -1.0);
        auto [da1, db1] = detail::highlighted_backward(pair.f_a, pair.f_b, out.c_ba, gta, opt);
        auto [db2, da2] = detail::highlighted_backward(pair.f_b, pair.f_a, out.c_ab, gtb, opt);
        grads.f_a += da1;
        grads.f_a += da2;
        grads.f_b += db1;
        grads.f_b += db2;
    }
    return grads;
}

// ---------------------------------------------------------------- visualization

struct AttentionSummary {
    Grid<std::uint8_t> image;
    /// The channel sum was constant; the image is uniformly 128.
    bool degenerate = false;
};

/// Channel-wise sum of sigmoid(f), min-max scaled to 0..255.
inline AttentionSummary export_attention_summary(const Tensor& f)
{
    require_rank(f, 3, "export_attention_summary");
    const std::size_t c = f.extent(0), h = f.extent(1), w = f.extent(2);
    const Tensor s = sigmoid(f);
    std::vector<double> sum(h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < h * w; ++i) sum[i] += s[ch * h * w + i];
    const auto [lo, hi] = std::minmax_element(sum.begin(), sum.end());
    AttentionSummary out{Grid<std::uint8_t>(h, w, 128), false};
    const double range = *hi - *lo;
    if (!(range > 1e-12 * std::max(1.0, std::abs(*hi)))) {
        out.degenerate = true;
        return out;
    }
    for (std::size_t i = 0; i < h * w; ++i) {
        out.image[i] = static_cast<std::uint8_t>(std::lround(255.0 * (sum[i] - *lo) / range));
    }
    return out;
}

} // namespace prs2
