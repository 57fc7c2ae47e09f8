#pragma once

// Binary masks, instance label maps, overlaps and maximal-overlap matching.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "tensor.hpp"

namespace prs2 {

template <class T>
class Grid {
public:
    Grid() = default;
    Grid(std::size_t height, std::size_t width, T fill = T{}) : height_(height), width_(width), cells_(height * width, fill) {}
    Grid(std::size_t height, std::size_t width, std::vector<T> cells)
        : height_(height), width_(width), cells_(std::move(cells))
    {
        if (cells_.size() != height_ * width_) {
            throw DimensionError("grid " + std::to_string(height_) + "x" + std::to_string(width_) + " given " +
                                 std::to_string(cells_.size()) + " cells");
        }
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    std::size_t size() const noexcept { return cells_.size(); }

    T& operator()(std::size_t r, std::size_t c) { return cells_[r * width_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return cells_[r * width_ + c]; }
    T& operator[](std::size_t i) { return cells_[i]; }
    const T& operator[](std::size_t i) const { return cells_[i]; }

    std::span<T> cells() noexcept { return cells_; }
    std::span<const T> cells() const noexcept { return cells_; }

    bool same_extents(const Grid& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }

    friend bool operator==(const Grid& a, const Grid& b) = default;

private:
    std::size_t height_ = 0;
    std::size_t width_ = 0;
    std::vector<T> cells_;
};

using BinaryMask = Grid<std::uint8_t>;
using LabelGrid = Grid<int>;

template <class A, class B>
void require_same_extents(const Grid<A>& a, const Grid<B>& b, const char* what)
{
    if (a.height() != b.height() || a.width() != b.width()) {
        throw DimensionError(std::string(what) + ": extent mismatch " + std::to_string(a.height()) + "x" +
                             std::to_string(a.width()) + " vs " + std::to_string(b.height()) + "x" +
                             std::to_string(b.width()));
    }
}

enum class Connectivity { Four = 4, Eight = 8 };

/// Label image with 0 = background and instances numbered 1..K without gaps.
class InstanceMap {
public:
    InstanceMap() = default;
    InstanceMap(std::size_t height, std::size_t width) : labels_(height, width, 0) {}

    /// Compacts arbitrary non-negative ids to 1..K in raster order of first
    /// appearance. Connectedness of each id is not enforced here.
    static InstanceMap from_labels(const LabelGrid& raw)
    {
        InstanceMap m;
        m.labels_ = LabelGrid(raw.height(), raw.width(), 0);
        std::unordered_map<int, int> remap;
        for (std::size_t i = 0; i < raw.size(); ++i) {
            const int v = raw[i];
            if (v < 0) throw std::invalid_argument("instance labels must be non-negative, got " + std::to_string(v));
            if (v == 0) continue;
            auto [it, inserted] = remap.try_emplace(v, static_cast<int>(remap.size()) + 1);
            m.labels_[i] = it->second;
        }
        m.count_ = remap.size();
        return m;
    }

    std::size_t height() const noexcept { return labels_.height(); }
    std::size_t width() const noexcept { return labels_.width(); }
    std::size_t count() const noexcept { return count_; }
    bool empty() const noexcept { return count_ == 0; }
    const LabelGrid& labels() const noexcept { return labels_; }
    int operator()(std::size_t r, std::size_t c) const { return labels_(r, c); }
    int operator[](std::size_t i) const { return labels_[i]; }

    /// Pixel areas of instances 1..K (index k-1).
    std::vector<std::int64_t> areas() const
    {
        std::vector<std::int64_t> a(count_, 0);
        for (int v : labels_.cells())
            if (v > 0) ++a[static_cast<std::size_t>(v - 1)];
        return a;
    }

    BinaryMask foreground() const
    {
        BinaryMask m(height(), width(), 0);
        for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] > 0 ? 1 : 0;
        return m;
    }

    BinaryMask instance_mask(int label) const
    {
        BinaryMask m(height(), width(), 0);
        for (std::size_t i = 0; i < labels_.size(); ++i) m[i] = labels_[i] == label ? 1 : 0;
        return m;
    }

    /// Labels are exactly {0} or {0} u {1..K} and each instance is connected.
    bool is_valid(Connectivity conn = Connectivity::Four) const;

    friend bool operator==(const InstanceMap& a, const InstanceMap& b) = default;

private:
    friend InstanceMap connected_components(const BinaryMask&, Connectivity);

    LabelGrid labels_;
    std::size_t count_ = 0;
};

namespace detail {

inline std::span<const std::pair<int, int>> neighbour_offsets(Connectivity conn)
{
    static const std::pair<int, int> four[] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
    static const std::pair<int, int> eight[] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {-1, -1}, {-1, 1}, {1, -1}, {1, 1}};
    if (conn == Connectivity::Four) return four;
    return eight;
}

struct DisjointSets {
    std::vector<int> parent;

    int make()
    {
        parent.push_back(static_cast<int>(parent.size()));
        return parent.back();
    }
    int find(int x)
    {
        while (parent[x] != x) {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        return x;
    }
    void unite(int a, int b)
    {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b) std::swap(a, b);
        parent[a] = b;
    }
};

} // namespace detail

/// Two-pass union-find labeling. Components are numbered in raster order of
/// their first pixel.
inline InstanceMap connected_components(const BinaryMask& mask, Connectivity conn = Connectivity::Four)
{
    const std::size_t h = mask.height(), w = mask.width();
    std::vector<int> provisional(mask.size(), -1);
    detail::DisjointSets sets;

    // previously visited neighbours in raster order
    static const std::pair<int, int> back4[] = {{-1, 0}, {0, -1}};
    static const std::pair<int, int> back8[] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}};
    std::span<const std::pair<int, int>> back = conn == Connectivity::Four ? std::span<const std::pair<int, int>>(back4)
                                                                             : std::span<const std::pair<int, int>>(back8);

    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            if (!mask(r, c)) continue;
            int label = -1;
            for (auto [dr, dc] : back) {
                const auto rr = static_cast<std::ptrdiff_t>(r) + dr;
                const auto cc = static_cast<std::ptrdiff_t>(c) + dc;
                if (rr < 0 || cc < 0 || cc >= static_cast<std::ptrdiff_t>(w)) continue;
                const int n = provisional[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
                if (n < 0) continue;
                if (label < 0) label = n;
                else sets.unite(label, n);
            }
            if (label < 0) label = sets.make();
            provisional[r * w + c] = label;
        }
    }

    InstanceMap out(h, w);
    std::vector<int> final_label(sets.parent.size(), 0);
    int next = 0;
    for (std::size_t i = 0; i < provisional.size(); ++i) {
        if (provisional[i] < 0) continue;
        const int root = sets.find(provisional[i]);
        if (final_label[root] == 0) final_label[root] = ++next;
        out.labels_[i] = final_label[root];
    }
    out.count_ = static_cast<std::size_t>(next);
    return out;
}

inline bool InstanceMap::is_valid(Connectivity conn) const
{
    std::vector<bool> seen(count_, false);
    for (int v : labels_.cells()) {
        if (v < 0 || static_cast<std::size_t>(v) > count_) return false;
        if (v > 0) seen[static_cast<std::size_t>(v - 1)] = true;
    }
    if (std::find(seen.begin(), seen.end(), false) != seen.end()) return false;
    // one component per label
    for (std::size_t k = 1; k <= count_; ++k) {
        if (connected_components(instance_mask(static_cast<int>(k)), conn).count() != 1) return false;
    }
    return true;
}

// ---------------------------------------------------------------- morphology

namespace detail {

// Square structuring element of side `size` anchored at size/2, matching the
// usual image-library convention; offsets span [-size/2, size - 1 - size/2].
inline std::pair<int, int> se_offsets(std::size_t size)
{
    const int lo = -static_cast<int>(size / 2);
    return {lo, lo + static_cast<int>(size) - 1};
}

} // namespace detail

/// Erosion by a size x size square; pixels outside the image count as
/// foreground, so objects touching the border are not clipped.
inline BinaryMask erode(const BinaryMask& mask, std::size_t se_size)
{
    if (se_size == 0) throw std::invalid_argument("structuring element size must be >= 1");
    const auto [lo, hi] = detail::se_offsets(se_size);
    const auto h = static_cast<int>(mask.height()), w = static_cast<int>(mask.width());
    // separable: rows then columns
    BinaryMask tmp(mask.height(), mask.width(), 0), out(mask.height(), mask.width(), 0);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = 1;
            for (int d = lo; d <= hi && v; ++d) {
                const int cc = c + d;
                if (cc >= 0 && cc < w && !mask(r, cc)) v = 0;
            }
            tmp(r, c) = v;
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = 1;
            for (int d = lo; d <= hi && v; ++d) {
                const int rr = r + d;
                if (rr >= 0 && rr < h && !tmp(rr, c)) v = 0;
            }
            out(r, c) = v;
        }
    }
    return out;
}

/// Dilation by the same square (reflected); pixels outside count as background.
inline BinaryMask dilate(const BinaryMask& mask, std::size_t se_size)
{
    if (se_size == 0) throw std::invalid_argument("structuring element size must be >= 1");
    const auto [lo, hi] = detail::se_offsets(se_size);
    const auto h = static_cast<int>(mask.height()), w = static_cast<int>(mask.width());
    BinaryMask tmp(mask.height(), mask.width(), 0), out(mask.height(), mask.width(), 0);
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = 0;
            for (int d = lo; d <= hi && !v; ++d) {
                const int cc = c - d;
                if (cc >= 0 && cc < w && mask(r, cc)) v = 1;
            }
            tmp(r, c) = v;
        }
    }
    for (int r = 0; r < h; ++r) {
        for (int c = 0; c < w; ++c) {
            std::uint8_t v = 0;
            for (int d = lo; d <= hi && !v; ++d) {
                const int rr = r - d;
                if (rr >= 0 && rr < h && tmp(rr, c)) v = 1;
            }
            out(r, c) = v;
        }
    }
    return out;
}

inline BinaryMask morphological_opening(const BinaryMask& mask, std::size_t se_size)
{
    return dilate(erode(mask, se_size), se_size);
}

// ---------------------------------------------------------------- overlaps

/// Row-major integer matrix; rows index predicted instances, columns ground truth.
struct OverlapMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::int64_t> counts;

    OverlapMatrix() = default;
    OverlapMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), counts(r * c, 0) {}
    OverlapMatrix(std::size_t r, std::size_t c, std::vector<std::int64_t> v) : rows(r), cols(c), counts(std::move(v))
    {
        if (counts.size() != rows * cols) throw DimensionError("overlap matrix value count mismatch");
    }

    std::int64_t& operator()(std::size_t i, std::size_t j) { return counts[i * cols + j]; }
    std::int64_t operator()(std::size_t i, std::size_t j) const { return counts[i * cols + j]; }

    friend bool operator==(const OverlapMatrix&, const OverlapMatrix&) = default;
};

inline OverlapMatrix overlap_matrix(const InstanceMap& pred, const InstanceMap& gt)
{
    require_same_extents(pred.labels(), gt.labels(), "overlap_matrix");
    OverlapMatrix m(pred.count(), gt.count());
    for (std::size_t i = 0; i < pred.labels().size(); ++i) {
        const int p = pred[i], g = gt[i];
        if (p > 0 && g > 0) ++m(static_cast<std::size_t>(p - 1), static_cast<std::size_t>(g - 1));
    }
    return m;
}

struct MatchResult {
    std::vector<std::optional<std::size_t>> pred_to_gt;
    std::vector<std::optional<std::size_t>> gt_to_pred;
    OverlapMatrix overlaps;
    std::vector<std::int64_t> pred_areas;
    std::vector<std::int64_t> gt_areas;
    /// |S_i| / sum |S_k|; empty when areas were not supplied or all zero.
    std::vector<double> pred_weights;
    /// |G_j| / sum |G_k|.
    std::vector<double> gt_weights;
};

namespace detail {

inline std::vector<double> area_fractions(const std::vector<std::int64_t>& areas)
{
    const double total = static_cast<double>(std::accumulate(areas.begin(), areas.end(), std::int64_t{0}));
    std::vector<double> w;
    if (total <= 0.0) return w;
    w.reserve(areas.size());
    for (auto a : areas) w.push_back(static_cast<double>(a) / total);
    return w;
}

} // namespace detail

/// Per-row and per-column argmax of the overlap counts (not a bijection).
/// Ties go to the smallest index; an all-zero row/column stays unmatched.
inline MatchResult maximal_overlap_matching(const OverlapMatrix& overlaps, std::vector<std::int64_t> pred_areas = {},
                                            std::vector<std::int64_t> gt_areas = {})
{
    MatchResult m;
    m.overlaps = overlaps;
    m.pred_to_gt.assign(overlaps.rows, std::nullopt);
    m.gt_to_pred.assign(overlaps.cols, std::nullopt);
    for (std::size_t i = 0; i < overlaps.rows; ++i) {
        std::int64_t best = 0;
        for (std::size_t j = 0; j < overlaps.cols; ++j) {
            if (overlaps(i, j) > best) {
                best = overlaps(i, j);
                m.pred_to_gt[i] = j;
            }
        }
    }
    for (std::size_t j = 0; j < overlaps.cols; ++j) {
        std::int64_t best = 0;
        for (std::size_t i = 0; i < overlaps.rows; ++i) {
            if (overlaps(i, j) > best) {
                best = overlaps(i, j);
                m.gt_to_pred[j] = i;
            }
        }
    }
    if (!pred_areas.empty() && pred_areas.size() != overlaps.rows) throw DimensionError("pred area count mismatch");
    if (!gt_areas.empty() && gt_areas.size() != overlaps.cols) throw DimensionError("gt area count mismatch");
    m.pred_weights = detail::area_fractions(pred_areas);
    m.gt_weights = detail::area_fractions(gt_areas);
    m.pred_areas = std::move(pred_areas);
    m.gt_areas = std::move(gt_areas);
    return m;
}

inline MatchResult match_instances(const InstanceMap& pred, const InstanceMap& gt)
{
    return maximal_overlap_matching(overlap_matrix(pred, gt), pred.areas(), gt.areas());
}

} // namespace prs2
