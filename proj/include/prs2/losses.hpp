#pragma once

// Segmentation losses with analytic gradients: cross-entropy, global Dice,
// object-level Dice, smooth L1, and their weighted assembly.

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "instance.hpp"
#include "tensor.hpp"

namespace prs2 {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A scalar loss and its gradient w.r.t. the differentiated input.
struct LossValue {
    double value = 0.0;
    Tensor grad;
};

inline constexpr double kCrossEntropyClamp = 1e-7;
inline constexpr double kDiceSmoothing = 1.0;

namespace detail {

inline void require_map_extents(const Tensor& t, const Grid<std::uint8_t>& g, const char* what)
{
    const std::size_t h = t.extent(t.rank() - 2), w = t.extent(t.rank() - 1);
    if (h != g.height() || w != g.width()) {
        throw DimensionError(std::string(what) + ": prediction " + shape_string(t.shape()) + " vs mask " +
                             std::to_string(g.height()) + "x" + std::to_string(g.width()));
    }
}

} // namespace detail

/// Mean over pixels of -log p[true class]; `pred` is 2 x H x W (background,
/// gland) probabilities, clamped to [eps, 1 - eps].
inline LossValue cross_entropy(const Tensor& pred, const BinaryMask& gt)
{
    require_rank(pred, 3, "cross_entropy");
    if (pred.extent(0) != 2) throw DimensionError("cross_entropy: expected 2 channels, got " + shape_string(pred.shape()));
    detail::require_map_extents(pred, gt, "cross_entropy");
    const std::size_t n = gt.size();
    LossValue out{0.0, Tensor::like(pred)};
    auto P = pred.data();
    auto G = out.grad.data();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = (gt[i] ? n : 0) + i;
        const double p = P[idx];
        const double pc = std::clamp(p, kCrossEntropyClamp, 1.0 - kCrossEntropyClamp);
        out.value -= std::log(pc) * inv_n;
        if (p == pc) G[idx] = -inv_n / p;
    }
    return out;
}

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps) over an H x W foreground map.
inline LossValue dice_loss(const Tensor& pred_fg, const BinaryMask& gt, double eps = kDiceSmoothing)
{
    require_rank(pred_fg, 2, "dice_loss");
    detail::require_map_extents(pred_fg, gt, "dice_loss");
    double inter = 0.0, psum = 0.0, gsum = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
        inter += pred_fg[i] * gt[i];
        psum += pred_fg[i];
        gsum += gt[i];
    }
    const double num = 2.0 * inter + eps, den = psum + gsum + eps;
    LossValue out{1.0 - num / den, Tensor::like(pred_fg)};
    for (std::size_t i = 0; i < gt.size(); ++i) out.grad[i] = -(2.0 * gt[i] * den - num) / (den * den);
    return out;
}

/// Discrete structure behind the object-level Dice loss: the thresholded
/// prediction's instances and their maximal-overlap matching to the ground
/// truth. Held constant while differentiating.
struct ObjectPartition {
    InstanceMap pred_instances;
    MatchResult match;
};

inline ObjectPartition partition_prediction(const Tensor& pred_fg, const InstanceMap& gt,
                                            Connectivity conn = Connectivity::Four, double threshold = 0.5)
{
    require_rank(pred_fg, 2, "partition_prediction");
    BinaryMask fg(pred_fg.extent(0), pred_fg.extent(1), 0);
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = pred_fg[i] > threshold ? 1 : 0;
    ObjectPartition part;
    part.pred_instances = connected_components(fg, conn);
    part.match = match_instances(part.pred_instances, gt);
    return part;
}

/// Object-level Dice loss with a frozen partition. Each matched term is a soft
/// Dice loss between `pred_fg` restricted to the pair's support (S u G) and
/// the binary GT instance; unmatched instances contribute a constant 1.
inline LossValue object_dice_loss(const Tensor& pred_fg, const InstanceMap& gt, const ObjectPartition& part,
                                  double eps = kDiceSmoothing)
{
    require_rank(pred_fg, 2, "object_dice_loss");
    const InstanceMap& pred = part.pred_instances;
    const MatchResult& m = part.match;
    LossValue out{0.0, Tensor::like(pred_fg)};
    if (pred.empty() && gt.empty()) return out;
    if (pred.empty() || gt.empty()) {
        out.value = 1.0;
        return out;
    }
    require_same_extents(pred.labels(), gt.labels(), "object_dice_loss");

    // Adds weight * DiceLoss(G_gt, p|S_pred u G_gt) and its gradient.
    auto add_term = [&](int pred_label, int gt_label, double weight) {
        double inter = 0.0, psum = 0.0, gsum = 0.0;
        for (std::size_t i = 0; i < pred_fg.size(); ++i) {
            const bool in_g = gt[i] == gt_label;
            if (!in_g && pred[i] != pred_label) continue;
            psum += pred_fg[i];
            if (in_g) {
                inter += pred_fg[i];
                gsum += 1.0;
            }
        }
        const double num = 2.0 * inter + eps, den = psum + gsum + eps;
        out.value += weight * (1.0 - num / den);
        for (std::size_t i = 0; i < pred_fg.size(); ++i) {
            const bool in_g = gt[i] == gt_label;
            if (!in_g && pred[i] != pred_label) continue;
            out.grad[i] += weight * -(2.0 * (in_g ? 1.0 : 0.0) * den - num) / (den * den);
        }
    };

    for (std::size_t i = 0; i < pred.count(); ++i) {
        const double w = 0.5 * m.pred_weights[i];
        if (m.pred_to_gt[i]) add_term(static_cast<int>(i + 1), static_cast<int>(*m.pred_to_gt[i] + 1), w);
        else out.value += w;
    }
    for (std::size_t j = 0; j < gt.count(); ++j) {
        const double w = 0.5 * m.gt_weights[j];
        if (m.gt_to_pred[j]) add_term(static_cast<int>(*m.gt_to_pred[j] + 1), static_cast<int>(j + 1), w);
        else out.value += w;
    }
    return out;
}

/// Recomputes the partition from `pred_fg` (threshold 0.5 + components) and
/// evaluates the loss with it frozen.
inline LossValue object_dice_loss(const Tensor& pred_fg, const InstanceMap& gt, Connectivity conn = Connectivity::Four)
{
    return object_dice_loss(pred_fg, gt, partition_prediction(pred_fg, gt, conn));
}

/// Mean smooth-L1 with transition at |d| = 1; `target` receives no gradient.
inline LossValue smooth_l1(const Tensor& x, const Tensor& target)
{
    Tensor::require_same_shape(x, target, "smooth_l1");
    LossValue out{0.0, Tensor::like(x)};
    const double inv_n = 1.0 / static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - target[i];
        const double ad = std::abs(d);
        out.value += (ad < 1.0 ? 0.5 * d * d : ad - 0.5) * inv_n;
        out.grad[i] = (ad < 1.0 ? d : (d > 0.0 ? 1.0 : -1.0)) * inv_n;
    }
    return out;
}

// ---------------------------------------------------------------- assembly

/// Which terms of the multi-level segmentation loss are active.
struct LossToggles {
    bool ce = true;
    bool dice = true;
    bool objdice = true;

    static LossToggles dice_only() { return {false, true, false}; }
    static LossToggles ce_only() { return {true, false, false}; }
    static LossToggles ce_dice() { return {true, true, false}; }
    static LossToggles full() { return {true, true, true}; }

    std::string label() const
    {
        std::string s;
        auto add = [&](bool on, const char* n) {
            if (!on) return;
            if (!s.empty()) s += '+';
            s += n;
        };
        add(ce, "ce");
        add(dice, "dice");
        add(objdice, "objdice");
        return s.empty() ? "none" : s;
    }
};

struct LossBundle {
    double l_ce = 0.0;
    double l_dice = 0.0;
    double l_objdice = 0.0;
    double l_seg = 0.0;
    double l_pr = 0.0;
    double l_total = 0.0;
    double alpha = 0.0;
    std::map<std::string, Tensor> grads;
};

/// Evaluates the enabled segmentation terms on a 2 x H x W probability map.
/// Disabled terms report 0. `grads["probs"]` holds dL_seg/dprobs.
inline LossBundle segmentation_loss(const Tensor& probs, const InstanceMap& gt, LossToggles toggles = {},
                                    Connectivity conn = Connectivity::Four)
{
    require_rank(probs, 3, "segmentation_loss");
    const std::size_t h = probs.extent(1), w = probs.extent(2);
    const BinaryMask fg_mask = gt.foreground();
    Tensor fg({h, w});
    std::copy_n(probs.data().begin() + static_cast<std::ptrdiff_t>(h * w), h * w, fg.data().begin());

    LossBundle b;
    Tensor dprobs = Tensor::like(probs);
    Tensor dfg({h, w});
    if (toggles.ce) {
        auto ce = cross_entropy(probs, fg_mask);
        b.l_ce = ce.value;
        dprobs += ce.grad;
    }
    if (toggles.dice) {
        auto d = dice_loss(fg, fg_mask);
        b.l_dice = d.value;
        dfg += d.grad;
    }
    if (toggles.objdice) {
        auto od = object_dice_loss(fg, gt, conn);
        b.l_objdice = od.value;
        dfg += od.grad;
    }
    for (std::size_t i = 0; i < h * w; ++i) dprobs[h * w + i] += dfg[i];
    b.l_seg = b.l_ce + b.l_dice + b.l_objdice;
    b.l_total = b.l_seg;
    b.grads.emplace("probs", std::move(dprobs));
    return b;
}

/// L_total = L_seg + alpha * L_PR; gradients keyed identically are summed,
/// PR gradients are scaled by alpha.
inline LossBundle total_loss(LossBundle seg, double l_pr, double alpha,
                             const std::map<std::string, Tensor>& pr_grads = {})
{
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be >= 0, got " + std::to_string(alpha));
    seg.l_seg = seg.l_ce + seg.l_dice + seg.l_objdice;
    seg.l_pr = l_pr;
    seg.alpha = alpha;
    seg.l_total = seg.l_seg + alpha * l_pr;
    for (const auto& [key, g] : pr_grads) {
        Tensor scaled = g * alpha;
        auto it = seg.grads.find(key);
        if (it == seg.grads.end()) seg.grads.emplace(key, std::move(scaled));
        else it->second += scaled;
    }
    return seg;
}

} // namespace prs2
